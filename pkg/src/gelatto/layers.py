"""Pointwise MLPs and the two-headed geometric/latent attention layer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    batch_norm,
    channel_slice,
    concat,
    gather_rows,
    linear_pointwise,
    mul,
    reduce,
    relu,
    repeat_channels,
    replicate,
    softmax_axis,
    sub,
)

HEAD_MODES = ("both", "geometric", "latent", "pool")


class Module:
    """Minimal parameter container with dotted-name traversal."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class SharedMLP(Module):
    """Affine map shared over points, optionally followed by batch norm and ReLU."""

    def __init__(
        self,
        din: int,
        dout: int,
        rng: np.random.Generator | None = None,
        use_bn: bool = False,
        use_relu: bool = False,
        momentum: float = 0.1,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(he_uniform(rng, din, dout), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)
        self.use_bn = use_bn
        self.use_relu = use_relu
        self.momentum = momentum
        if use_bn:
            self.gamma = Tensor(np.ones(dout), requires_grad=True)
            self.beta = Tensor(np.zeros(dout), requires_grad=True)
            self.running_mean = np.zeros(dout)
            self.running_var = np.ones(dout)

    @property
    def din(self) -> int:
        return self.weight.shape[0]

    @property
    def dout(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def from_weights(cls, weight, bias=None, use_relu: bool = False) -> "SharedMLP":
        weight = np.asarray(weight, dtype=np.float64)
        layer = cls(weight.shape[0], weight.shape[1], use_relu=use_relu)
        layer.weight.data = weight.copy()
        if bias is not None:
            layer.bias.data = np.asarray(bias, dtype=np.float64).reshape(-1).copy()
        return layer

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y = linear_pointwise(x, self.weight, self.bias)
        if self.use_bn:
            y = batch_norm(y, self.gamma, self.beta, self.running_mean, self.running_var,
                           training, self.momentum)
        if self.use_relu:
            y = relu(y)
        return y


def shared_mlp_forward(x: Tensor, layer: SharedMLP, training: bool) -> Tensor:
    return layer(x, training)


def vector_attention(values: Tensor, scorer: SharedMLP, group_size: int = 1,
                     training: bool = False) -> tuple[Tensor, Tensor]:
    """Softmax-over-neighbours weighted sum with one score per channel group.

    ``values`` is ``[..., K, D]``; the scorer maps ``D -> D / group_size``.
    Returns the aggregated ``[..., D]`` features and the replicated scores.
    """
    d = values.shape[-1]
    if d % group_size:
        raise DimensionError(f"group size {group_size} does not divide {d} channels")
    if scorer.din != d or scorer.dout != d // group_size:
        raise DimensionError(f"scorer {scorer.din}->{scorer.dout} unfit for D={d}, D'={group_size}")
    raw = scorer(values, training)
    scores = repeat_channels(softmax_axis(raw, axis=-2), group_size)
    out = reduce(mul(scores, values), axis=-2, kind="sum")
    return out, scores


def multi_head_attention_reference(values: Tensor, scorer: SharedMLP, n_heads: int,
                                   training: bool = False) -> Tensor:
    """Head-by-head attention: one softmax score per neighbour per head.

    Each head owns ``D / n_heads`` consecutive channels and reads its score
    from the scorer's matching output channel.
    """
    d = values.shape[-1]
    if n_heads < 1 or d % n_heads:
        raise ContractError(f"{n_heads} heads do not divide {d} channels")
    if scorer.dout != n_heads:
        raise DimensionError(f"scorer has {scorer.dout} outputs for {n_heads} heads")
    head_dim = d // n_heads
    raw = scorer(values, training)
    heads = []
    for h in range(n_heads):
        weight = softmax_axis(channel_slice(raw, h, h + 1), axis=-2)
        weight = repeat_channels(weight, head_dim)
        v = channel_slice(values, h * head_dim, (h + 1) * head_dim)
        heads.append(reduce(mul(weight, v), axis=-2, kind="sum"))
    return heads[0] if n_heads == 1 else concat(heads, axis=-1)


def neighborhood_maxpool(values: Tensor) -> Tensor:
    return reduce(values, axis=-2, kind="max")


@dataclass
class AttentionTrace:
    geometric: np.ndarray | None
    latent: np.ndarray | None


class GeLatto(Module):
    """Two-headed attention over radius neighbourhoods.

    ``heads`` selects ``both``, ``geometric``, ``latent`` or ``pool`` (both
    attentions replaced by a channelwise max over the neighbourhood).
    """

    def __init__(
        self,
        dim: int,
        rng: np.random.Generator | None = None,
        group_size: int = 1,
        heads: str = "both",
        inner_bn: bool = False,
    ):
        if heads not in HEAD_MODES:
            raise ValueError(f"heads must be one of {HEAD_MODES}")
        if dim % group_size:
            raise ContractError(f"group size {group_size} does not divide {dim}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.group_size, self.heads = dim, group_size, heads

        def mlp(din, dout):
            return SharedMLP(din, dout, rng, use_bn=inner_bn, use_relu=inner_bn)

        self.f_r = mlp(dim, dim)
        self.f_rs = mlp(dim, dim)
        self.f_p = mlp(3, dim)
        self.f_pq = mlp(3, dim)
        self.f_q = mlp(3, dim)
        self.f_hg = mlp(dim, dim)
        self.f_gg = mlp(dim, dim)
        if heads != "geometric":
            self.f_s = mlp(dim, dim)
            self.f_gh = mlp(dim, dim)
            self.f_hh = mlp(dim, dim)
        if heads in ("both", "geometric"):
            self.f_g_att = SharedMLP(dim, dim // group_size, rng)
        if heads in ("both", "latent"):
            self.f_h_att = SharedMLP(dim, dim // group_size, rng)
        width = dim if heads in ("geometric", "latent") else 2 * dim
        self.f_o = SharedMLP(width, dim, rng)

    def __call__(self, centroid_positions, neighbors, parent_positions, r: Tensor,
                 parent_features: Tensor, training: bool = False):
        return gelatto_forward(centroid_positions, neighbors, parent_positions, r,
                               parent_features, self, training)


def gelatto_forward(
    p: np.ndarray,
    neighbors: np.ndarray,
    parent_positions: np.ndarray,
    r: Tensor,
    parent_features: Tensor,
    params: GeLatto,
    training: bool = False,
) -> tuple[Tensor, AttentionTrace]:
    """One two-headed layer.

    Shapes (a leading batch axis is optional throughout): ``p`` ``[M, 3]``,
    ``neighbors`` ``[M, K]`` indices into the parent cloud,
    ``parent_positions`` ``[N, 3]``, ``r`` ``[M, D]``, ``parent_features``
    ``[N, D]``. Returns ``[M, D]``.
    """
    if r.shape[-1] != params.dim or parent_features.shape[-1] != params.dim:
        raise DimensionError(f"features of width {r.shape[-1]} for a layer of width {params.dim}")
    neighbors = np.asarray(neighbors)
    k = neighbors.shape[-1]
    p = np.asarray(p, dtype=np.float64)
    q_pos = _gather_positions(parent_positions, neighbors)
    p_rep = np.repeat(p[..., None, :], k, axis=-2)
    s = gather_rows(parent_features, neighbors)
    r_rep = replicate(r, k, axis=-2)

    h = add(params.f_r(r_rep, training), params.f_rs(sub(s, r_rep), training))
    g = add(
        add(params.f_p(Tensor(p_rep), training), params.f_pq(Tensor(q_pos - p_rep), training)),
        add(params.f_q(Tensor(q_pos), training), params.f_hg(h, training)),
    )
    g2 = params.f_gg(g, training)
    h2 = None
    if params.heads != "geometric":
        h1 = add(add(h, params.f_s(s, training)), params.f_gh(g, training))
        h2 = params.f_hh(h1, training)

    geo_scores = lat_scores = None
    if params.heads == "pool":
        parts = [neighborhood_maxpool(g2), neighborhood_maxpool(h2)]
    else:
        parts = []
        if params.heads in ("both", "geometric"):
            g_out, geo = vector_attention(g2, params.f_g_att, params.group_size, training)
            parts.append(g_out)
            geo_scores = geo.data
        if params.heads in ("both", "latent"):
            h_out, lat = vector_attention(h2, params.f_h_att, params.group_size, training)
            parts.append(h_out)
            lat_scores = lat.data
    joined = parts[0] if len(parts) == 1 else concat(parts, axis=-1)
    return params.f_o(joined, training), AttentionTrace(geo_scores, lat_scores)


def _gather_positions(positions: np.ndarray, index: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim == 2:
        return positions[index]
    batch = np.arange(positions.shape[0]).reshape((-1,) + (1,) * (index.ndim - 1))
    return positions[batch, index]
