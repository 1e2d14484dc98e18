"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape every op is a plain numpy
computation, which is what inference paths use.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce(mul(x, x), axis=0, kind="sum")
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64

# Reductions over axes up to this length accumulate slice by slice in index
# order, so results do not depend on memory layout (numpy switches to pairwise
# summation for contiguous axes).
ORDERED_SUM_MAX = 64


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what} of shape {self.shape}")
        return self

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are appended in
    execution order, which is already a topological order.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    @classmethod
    def _stack(cls) -> list["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def active(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward_fn: Callable) -> None:
        self.records.append((inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays; call ``zero_grad`` on
    parameters between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(out) for _, out, _ in tape.records}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for inputs, out, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if id(out) in leaves:
            leaves.pop(id(out))
        in_grads = fn(g)
        for inp, gi in zip(inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


# -- fault injection (used by the gradient-check negative controls) ---------

_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def inject_fault(op_name: str, scale: float = 1.5):
    """Scale the input gradients of ``op_name``'s backward rule by ``scale``."""
    _FAULTS[op_name] = scale
    try:
        yield
    finally:
        _FAULTS.pop(op_name, None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op_name: str, inputs: Sequence[Tensor], data: np.ndarray, fn: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = Tape.active()
    if requires and tape is not None:
        if op_name in _FAULTS:
            scale = _FAULTS[op_name]
            inner = fn

            def fn(g, inner=inner):
                return tuple(None if gi is None else gi * scale for gi in inner(g))

        tape.record(tuple(inputs), out, fn)
    return out


def _colsum(a2: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array (BLAS is far faster than ``sum(axis=0)`` here)."""
    return np.ones(a2.shape[0]) @ a2


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        tail = g.shape[extra:]
        g = _colsum(g.reshape(-1, int(np.prod(tail)))).reshape(tail)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def ordered_sum(a: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` in index order for short axes (layout independent)."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if n > ORDERED_SUM_MAX or n == 0:
        return np.sum(a, axis=axis, keepdims=keepdims)
    moved = np.moveaxis(a, axis, 0)
    acc = moved[0].copy()
    for k in range(1, n):
        acc += moved[k]
    return np.expand_dims(acc, axis) if keepdims else acc


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        (a, b),
        ad * bd,
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


# -- linear algebra ---------------------------------------------------------------


def linear_pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Shared affine map over the last axis: ``y[..., j] = x[..., i] W[i, j] + b[j]``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    y = x2 @ weight.data
    if bias is not None:
        y += bias.data
    y = y.reshape(*lead, weight.shape[1])
    w = weight.data

    def fn(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = _colsum(g2) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear_pointwise", inputs, y, fn)


# -- normalisation ----------------------------------------------------------------


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / ordered_sum(e, axis, keepdims=True)

    def fn(g):
        return (s * (g - ordered_sum(g * s, axis, keepdims=True)),)

    return _emit("softmax_axis", (x,), s, fn)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over all leading positions jointly.

    In training mode the running statistics are updated in place (unbiased
    variance, as is customary).
    """
    c = x.shape[-1]
    x2 = x.data.reshape(-1, c)
    n = x2.shape[0]
    if training:
        mean = _colsum(x2) / n
        centered = x2 - mean
        var = _colsum(centered * centered) / n
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
        centered = x2 - mean
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = (xhat * gamma.data + beta.data).reshape(x.shape)
    gd = gamma.data

    def fn(g):
        g2 = g.reshape(-1, c)
        ggamma = _colsum(g2 * xhat) if gamma.requires_grad else None
        gbeta = _colsum(g2) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g2 * gd
            if training:
                gx = inv * (gxhat - _colsum(gxhat) / n - xhat * (_colsum(gxhat * xhat) / n))
            else:
                gx = gxhat * inv
            gx = gx.reshape(x.shape)
        return (gx, ggamma, gbeta)

    return _emit("batch_norm", (x, gamma, beta), y, fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# -- indexing and shape -------------------------------------------------------------


def gather_rows(source: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., m, k, :] = source[..., index[..., m, k], :]``.

    ``source`` is ``[N, D]`` with ``index`` ``[M, K]``, or batched
    ``[B, N, D]`` with ``index`` ``[B, M, K]``. The backward pass
    scatter-adds into the source rows.
    """
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise ContractError("gather index must be integer")
    batched = source.ndim == 3
    if source.ndim not in (2, 3) or (batched and (index.ndim < 2 or index.shape[0] != source.shape[0])):
        raise DimensionError(f"cannot gather {index.shape} from {source.shape}")
    n, d = source.shape[-2], source.shape[-1]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather index out of range [0, {n})")
    if batched:
        b = source.shape[0]
        offsets = (np.arange(b) * n).reshape((b,) + (1,) * (index.ndim - 1))
        flat = (index + offsets).reshape(-1)
        total = b * n
    else:
        flat = index.reshape(-1)
        total = n
    out = source.data.reshape(total, d)[flat].reshape(index.shape + (d,))
    src_shape = source.shape

    def fn(g):
        scatter = sp.csr_matrix(
            (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(total, flat.size)
        )
        return (np.asarray(scatter @ g.reshape(-1, d)).reshape(src_shape),)

    return _emit("gather_rows", (source,), out, fn)


def take_rows(source: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along the point axis: ``[.., N, D]`` with ``[.., M]`` -> ``[.., M, D]``."""
    index = np.asarray(index)
    out = gather_rows(source, index[..., None])
    return reshape(out, index.shape + (source.shape[-1],))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(orig),))


def replicate(x: Tensor, k: int, axis: int = -2) -> Tensor:
    """Insert a new axis of length ``k`` at ``axis`` by repetition."""
    expanded = np.expand_dims(x.data, axis)
    reps = [1] * expanded.ndim
    reps[axis] = k
    out = np.tile(expanded, reps)
    return _emit("replicate", (x,), out, lambda g: (ordered_sum(g, axis),))


def repeat_channels(x: Tensor, r: int) -> Tensor:
    """Repeat every channel ``r`` times consecutively along the last axis."""
    if r == 1:
        return x
    out = np.repeat(x.data, r, axis=-1)
    shape = x.shape

    def fn(g):
        return (g.reshape(*shape, r).sum(axis=-1),)

    return _emit("repeat_channels", (x,), out, fn)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(x.data[..., start:stop])
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("channel_slice", (x,), out, fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, fn)


# -- reductions ---------------------------------------------------------------------


def reduce(x: Tensor, axis: int, kind: str = "sum") -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    axis = axis % x.ndim
    n = x.shape[axis]
    if kind == "sum":
        return _emit("reduce_sum", (x,), ordered_sum(x.data, axis),
                     lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))
    if kind == "mean":
        return _emit("reduce_mean", (x,), ordered_sum(x.data, axis) / n,
                     lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),))
    if kind == "max":
        # argmax returns the first maximal element: lowest index wins ties
        arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
        out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

        def fn(g):
            gx = np.zeros(x.shape)
            np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
            return (gx,)

        return _emit("reduce_max", (x,), out, fn)
    raise ValueError(f"unknown reduction {kind!r}")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum_all", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def smoothed_cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against label-smoothed targets.

    The target puts ``1 - smoothing`` on the true class and spreads
    ``smoothing`` evenly over the other ``C - 1`` classes.
    """
    c = logits.shape[-1]
    z = logits.data.reshape(-1, c)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label outside [0, {c})")
    target = np.full(z.shape, smoothing / (c - 1))
    target[np.arange(z.shape[0]), labels] = 1.0 - smoothing
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = z.shape[0]
    loss = -(target * logp).sum() / n

    def fn(g):
        p = np.exp(logp)
        return (((p - target) * (float(g) / n)).reshape(logits.shape),)

    return _emit("smoothed_cross_entropy", (logits,), np.asarray(loss), fn)


# -- gradient checking ------------------------------------------------------------------


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def analytic_grads(f: Callable[[], Tensor], tensors: Iterable[Tensor]) -> list[np.ndarray]:
    tensors = list(tensors)
    saved = [(t.requires_grad, t.grad) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        return [np.zeros(t.shape) if t.grad is None else t.grad for t in tensors]
    finally:
        for t, (req, grad) in zip(tensors, saved):
            t.requires_grad, t.grad = req, grad


def numeric_grad(f: Callable[[], Tensor], t: Tensor, eps: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f().data)
        flat[i] = orig - eps
        down = float(f().data)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * eps)
    return out.reshape(t.shape)


def gradcheck_many(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Max relative error per tensor for the closure ``f`` over ``tensors``."""
    first, second = float(f().data), float(f().data)
    if first != second:
        raise ContractError("gradcheck needs a deterministic function (is dropout on?)")
    analytic = analytic_grads(f, tensors)
    return [_relative_error(a, numeric_grad(f, t, eps)) for a, t in zip(analytic, tensors)]


def finite_diff_gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|, |central|)``."""
    return gradcheck_many(lambda: f(x), [x], eps)[0]
