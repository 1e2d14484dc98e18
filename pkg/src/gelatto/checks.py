"""Finite-difference gradient suite for the ops, layers and a micro network."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import radius_neighbors
from .layers import GeLatto, SharedMLP, vector_attention
from .network import LayerConfig, NetworkConfig, SegmentationNet, TrainConfig, composite_loss

OP_TOL = 1e-6
LAYER_TOL = 1e-5
NETWORK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" worst={self.worst}" if self.worst else ""
        return f"{status} {self.name} err={self.error:.3e} tol={self.tol:.0e}{extra}"


@dataclass
class Report:
    results: list[CheckResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def worst(self) -> CheckResult:
        return max(self.results, key=lambda r: r.error / r.tol)

    def format(self) -> str:
        lines = [r.line() for r in self.results]
        w = self.worst()
        where = f"{w.name}" + (f" ({w.worst})" if w.worst else "")
        lines.append(f"worst offender: {where} err={w.error:.3e}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'} {len(self.results)} checks "
                     f"in {self.seconds:.1f}s")
        return "\n".join(lines)


def _check(name, f, tensors, tol, labels=None, eps=1e-5) -> CheckResult:
    errors = T.gradcheck_many(f, tensors, eps)
    i = int(np.argmax(errors))
    worst = labels[i] if labels else ""
    return CheckResult(name, float(errors[i]), tol, worst)


def _rand(rng, *shape, low=-2.0, high=2.0):
    return T.Tensor(rng.uniform(low, high, shape))


def op_checks(rng: np.random.Generator) -> list[CheckResult]:
    """Every tensor op composed with a random linear readout."""
    out = []

    def readout(y: T.Tensor, w: np.ndarray) -> T.Tensor:
        return T.sum_all(T.mul(y, w))

    def case(name, build, inputs, shape):
        w = rng.normal(size=shape)
        out.append(_check(name, lambda: readout(build(*inputs), w), inputs, OP_TOL))

    a, b = _rand(rng, 4, 3), _rand(rng, 4, 3)
    case("add", T.add, (a, b), (4, 3))
    case("sub", T.sub, (a, b), (4, 3))
    case("mul", T.mul, (a, b), (4, 3))
    bias_row = _rand(rng, 3)
    case("add_broadcast", T.add, (a, bias_row), (4, 3))
    # keep relu inputs away from the kink
    x = T.Tensor(rng.uniform(0.1, 2.0, (5, 4)) * rng.choice([-1.0, 1.0], (5, 4)))
    case("relu", T.relu, (x,), (5, 4))
    x, w, bias = _rand(rng, 2, 5, 3), _rand(rng, 3, 4), _rand(rng, 4)
    case("linear_pointwise", T.linear_pointwise, (x, w, bias), (2, 5, 4))
    x = _rand(rng, 3, 5, 4)
    case("softmax_axis", lambda t: T.softmax_axis(t, -2), (x,), (3, 5, 4))
    x, gamma, beta = _rand(rng, 6, 3), _rand(rng, 3), _rand(rng, 3)
    case("batch_norm_train",
         lambda t, g, b_: T.batch_norm(t, g, b_, np.zeros(3), np.ones(3), True), (x, gamma, beta),
         (6, 3))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, 3)
    case("batch_norm_eval",
         lambda t, g, b_: T.batch_norm(t, g, b_, rm.copy(), rv.copy(), False), (x, gamma, beta),
         (6, 3))
    src = _rand(rng, 2, 5, 3)
    idx = rng.integers(0, 5, (2, 4, 3))
    case("gather_rows", lambda s: T.gather_rows(s, idx), (src,), (2, 4, 3, 3))
    case("replicate", lambda t: T.replicate(t, 3), (a,), (4, 3, 3))
    case("repeat_channels", lambda t: T.repeat_channels(t, 2), (a,), (4, 6))
    case("channel_slice", lambda t: T.channel_slice(t, 1, 3), (a,), (4, 2))
    case("concat", lambda s, t: T.concat([s, t]), (a, b), (4, 6))
    case("reshape", lambda t: T.reshape(t, (3, 4)), (a,), (3, 4))
    case("reduce_sum", lambda t: T.reduce(t, 0, "sum"), (a,), (3,))
    case("reduce_mean", lambda t: T.reduce(t, 1, "mean"), (a,), (4,))
    # distinct values so the maximum is unique and stable under perturbation
    x = T.Tensor(rng.permutation(12).reshape(4, 3) * 0.3)
    case("reduce_max", lambda t: T.reduce(t, 1, "max"), (x,), (4,))
    logits = _rand(rng, 7, 3)
    labels = rng.integers(0, 3, 7)
    out.append(_check("smoothed_cross_entropy",
                      lambda: T.smoothed_cross_entropy(logits, labels, 0.1), [logits], OP_TOL))
    return out


def _named(module) -> tuple[list[T.Tensor], list[str]]:
    pairs = list(module.named_parameters())
    return [p for _, p in pairs], [n for n, _ in pairs]


def layer_checks(rng: np.random.Generator) -> list[CheckResult]:
    out = []
    x = _rand(rng, 2, 6, 5)
    w = rng.normal(size=(2, 6, 4))
    mlp = SharedMLP(5, 4, rng, use_bn=True, use_relu=False)
    mlp.beta.data = rng.normal(size=4)
    params, names = _named(mlp)
    out.append(_check("shared_mlp_bn", lambda: T.sum_all(T.mul(mlp(x, training=True), w)),
                      [x] + params, LAYER_TOL, ["input"] + names))

    for group in (1, 2):
        vals = _rand(rng, 3, 4, 4)
        scorer = SharedMLP(4, 4 // group, rng)
        w = rng.normal(size=(3, 4))
        params, names = _named(scorer)
        out.append(_check(
            f"vector_attention_g{group}",
            lambda: T.sum_all(T.mul(vector_attention(vals, scorer, group)[0], w)),
            [vals] + params, LAYER_TOL, ["values"] + names,
        ))

    n, m, k, d = 10, 4, 3, 4
    parent = rng.uniform(0, 1, (n, 3))
    centroids = np.arange(m)
    nb = radius_neighbors(parent[centroids], parent, 0.8, k).neighbors
    for heads in ("both", "geometric", "latent"):
        layer = GeLatto(d, rng, heads=heads)
        feats = _rand(rng, n, d)
        r = _rand(rng, m, d)
        w = rng.normal(size=(m, d))
        params, names = _named(layer)

        def f(layer=layer, feats=feats, r=r, w=w):
            y, _ = layer(parent[centroids], nb, parent, r, feats)
            return T.sum_all(T.mul(y, w))

        out.append(_check(f"gelatto_{heads}", f, [feats, r] + params, LAYER_TOL,
                          ["parent_features", "r"] + names))
    return out


def micro_network(seed: int = 0):
    """N=24, D=8, two levels, three classes; BN in eval mode with non-trivial statistics."""
    cfg = NetworkConfig(
        num_classes=3,
        stem_width=8,
        layers=[LayerConfig(12, 0.5, 4, 8, 2), LayerConfig(6, 1.0, 4, 8, 2)],
    )
    model = SegmentationNet(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, buf in model.named_buffers():
        if name.endswith("running_mean"):
            buf[...] = rng.normal(0.0, 0.2, buf.shape)
        elif name.endswith("running_var"):
            buf[...] = rng.uniform(0.5, 1.5, buf.shape)
    for name, p in model.named_parameters():
        if name.endswith("bias") or name.endswith("beta"):
            p.data = rng.normal(0.0, 0.1, p.shape)
    positions = rng.uniform(0, 1, (24, 3))
    features = np.concatenate([positions, rng.uniform(0, 1, (24, 3))], axis=1)
    labels = rng.integers(0, 3, 24)
    return model, positions, features, labels


def network_check(seed: int = 0) -> CheckResult:
    model, positions, features, labels = micro_network(seed)
    train = TrainConfig(aux_weights=(0.4, 0.4))
    params, names = _named(model)

    def f():
        main, aux, pyramid = model(positions, features, training=False)
        return composite_loss(main, aux, labels[None], pyramid, train).total

    return _check("micro_network", f, params, NETWORK_TOL, names, eps=1e-6)


def run_suite(seed: int = 0, include_network: bool = True) -> Report:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = op_checks(rng) + layer_checks(rng)
    if include_network:
        results.append(network_check(seed))
    return Report(results, time.perf_counter() - start)
