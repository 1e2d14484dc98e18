"""Encoder/decoder segmentation network built from bottleneck ResNet blocks."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry
from .layers import HEAD_MODES, AttentionTrace, GeLatto, Module, SharedMLP, neighborhood_maxpool
from .tensor import (
    ContractError,
    NumericError,
    Tensor,
    add,
    concat,
    dropout,
    gather_rows,
    mul,
    reduce,
    relu,
    smoothed_cross_entropy,
    take_rows,
)

MIN_INPUT_POINTS = 8


@dataclass
class LayerConfig:
    sample_count: int
    radius: float
    k: int
    width: int
    bottleneck: int = 4

    @property
    def inner_width(self) -> int:
        return self.width // self.bottleneck


def default_layers() -> list[LayerConfig]:
    return [
        LayerConfig(4096, 0.10, 32, 64),
        LayerConfig(2048, 0.20, 32, 128),
        LayerConfig(512, 0.40, 32, 256),
        LayerConfig(128, 0.80, 16, 512),
    ]


@dataclass
class NetworkConfig:
    num_classes: int = 13
    in_channels: int = 6
    stem_width: int = 32
    layers: list[LayerConfig] = field(default_factory=default_layers)
    heads: str = "both"
    group_size: int = 1
    inner_bn: bool = False
    bn_momentum: float = 0.1

    def validate(self) -> "NetworkConfig":
        if self.num_classes < 2:
            raise ContractError("need at least two classes")
        if self.heads not in HEAD_MODES:
            raise ContractError(f"heads must be one of {HEAD_MODES}")
        if not self.layers:
            raise ContractError("need at least one encoder layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.sample_count >= a.sample_count:
                raise ContractError("layer sample counts must strictly decrease")
            if b.radius != 2.0 * a.radius:
                raise ContractError(f"radius {b.radius} is not double {a.radius}")
        for cfg in self.layers:
            if cfg.radius <= 0 or cfg.k < 1 or cfg.width % cfg.bottleneck:
                raise ContractError(f"invalid layer config {cfg}")
            if cfg.inner_width % self.group_size:
                raise ContractError(f"group size {self.group_size} does not divide {cfg.inner_width}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["layers"] = [LayerConfig(**layer) for layer in d.get("layers", [])]
        return cls(**d)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    batch_size: int = 2
    label_smoothing: float = 0.1
    aux_weights: tuple[float, ...] = (0.4, 0.4, 0.4, 0.4)
    epochs: int = 50
    seed: int = 0
    dropout: float = 0.5

    def validate(self) -> "TrainConfig":
        if any(a < 0 for a in self.aux_weights):
            raise ContractError("auxiliary weights must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractError("label smoothing must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ContractError("invalid batch size, epoch count or learning rate")
        return self


@dataclass
class Level:
    points: np.ndarray
    features: Tensor
    sample_index: np.ndarray | None = None
    neighbors: dict[str, np.ndarray] = field(default_factory=dict)
    radii: dict[str, float] = field(default_factory=dict)
    traces: dict[str, AttentionTrace] = field(default_factory=dict)


@dataclass
class PyramidState:
    levels: list[Level]

    def level_sizes(self) -> list[int]:
        return [lv.points.shape[1] for lv in self.levels]

    def original_indices(self, level: int) -> np.ndarray:
        """Indices into the input cloud of every point retained at ``level``."""
        idx = np.broadcast_to(np.arange(self.levels[0].points.shape[1]),
                              self.levels[0].points.shape[:2])
        for lv in self.levels[1 : level + 1]:
            idx = np.take_along_axis(idx, lv.sample_index, axis=1)
        return idx

    def level_labels(self, labels: np.ndarray) -> list[np.ndarray]:
        labels = np.asarray(labels).reshape(self.levels[0].points.shape[:2])
        out = [labels]
        for lv in self.levels[1:]:
            out.append(np.take_along_axis(out[-1], lv.sample_index, axis=1))
        return out


class ResnetBlock(Module):
    """Bottleneck block: entry MLP, Ge-Latto, exit MLP, plus a residual path.

    Strided blocks take their neighbourhoods from the parent cloud and
    max-pool the residual over them; same-resolution blocks use an identity
    residual when widths agree.
    """

    def __init__(self, din: int, cfg: LayerConfig, strided: bool, net: NetworkConfig,
                 rng: np.random.Generator):
        mid = cfg.inner_width
        self.strided = strided
        self.entry = SharedMLP(din, mid, rng, use_bn=True, use_relu=True, momentum=net.bn_momentum)
        self.attn = GeLatto(mid, rng, group_size=net.group_size, heads=net.heads,
                            inner_bn=net.inner_bn)
        self.exit = SharedMLP(mid, cfg.width, rng, use_bn=True, momentum=net.bn_momentum)
        self.shortcut = (
            SharedMLP(din, cfg.width, rng, use_bn=True, momentum=net.bn_momentum)
            if strided or din != cfg.width
            else None
        )

    def __call__(self, parent_points, parent_features: Tensor, centroids: np.ndarray,
                 neighbors: np.ndarray, training: bool):
        x = self.entry(parent_features, training)
        if self.strided:
            r = take_rows(x, centroids)
            points = np.take_along_axis(parent_points, centroids[..., None], axis=1)
        else:
            r, points = x, parent_points
        o, trace = self.attn(points, neighbors, parent_points, r, x, training)
        main = self.exit(o, training)
        if self.strided:
            residual = neighborhood_maxpool(gather_rows(parent_features, neighbors))
        else:
            residual = parent_features
        if self.shortcut is not None:
            residual = self.shortcut(residual, training)
        return points, relu(add(main, residual)), trace


def resnet_block_strided(parent_points, parent_features, cfg: LayerConfig, block: ResnetBlock,
                         training: bool = False, seed=None):
    """Sample ``cfg.sample_count`` centroids by FPS, group, and run ``block``.

    Unbatched convenience wrapper: ``parent_points`` ``[N, 3]``,
    ``parent_features`` ``[N, D]``.
    """
    n = len(parent_points)
    if cfg.sample_count > n:
        raise ContractError(f"cannot sample {cfg.sample_count} of {n} points")
    idx = geometry.farthest_point_sample(parent_points, cfg.sample_count)
    nb = geometry.radius_neighbors(parent_points[idx], parent_points, cfg.radius, cfg.k, seed, idx)
    points, feats, trace = block(parent_points[None], _batched(parent_features), idx[None],
                                 nb.neighbors[None], training)
    return points[0], _unbatched(feats), trace, nb


def resnet_block_same(points, features, cfg: LayerConfig, block: ResnetBlock,
                      training: bool = False, seed=None):
    nb = geometry.radius_neighbors(points, points, 2.0 * cfg.radius, cfg.k, seed)
    idx = np.arange(len(points))
    out_points, feats, trace = block(points[None], _batched(features), idx[None],
                                     nb.neighbors[None], training)
    return out_points[0], _unbatched(feats), trace, nb


def _batched(t: Tensor) -> Tensor:
    from .tensor import reshape

    return reshape(t, (1,) + t.shape)


def _unbatched(t: Tensor) -> Tensor:
    from .tensor import reshape

    return reshape(t, t.shape[1:])


class Encoder(Module):
    def __init__(self, net: NetworkConfig, rng: np.random.Generator):
        self.stem = SharedMLP(net.in_channels, net.stem_width, rng, use_bn=True, use_relu=True,
                              momentum=net.bn_momentum)
        self.layers = net.layers
        blocks = []
        din = net.stem_width
        for cfg in net.layers:
            blocks.append(ResnetBlock(din, cfg, True, net, rng))
            blocks.append(ResnetBlock(cfg.width, cfg, False, net, rng))
            din = cfg.width
        self.blocks = blocks

    def __call__(self, positions: np.ndarray, features: Tensor, training: bool = False,
                 neighbor_seed: int | None = None) -> PyramidState:
        positions = np.asarray(positions, dtype=np.float64)
        b, n = positions.shape[:2]
        if n < MIN_INPUT_POINTS:
            raise ContractError(f"need at least {MIN_INPUT_POINTS} input points, got {n}")
        seeds = _block_seeds(neighbor_seed, b, 2 * len(self.layers))
        x = self.stem(features, training)
        levels = [Level(positions, x)]
        points = positions
        for li, cfg in enumerate(self.layers):
            m = min(cfg.sample_count, points.shape[1])
            centroids = np.stack([geometry.farthest_point_sample(pts, m) for pts in points])
            sampled = np.take_along_axis(points, centroids[..., None], axis=1)
            strided_nb = np.stack([
                geometry.radius_neighbors(sampled[i], points[i], cfg.radius, cfg.k,
                                          seeds[i][2 * li]).neighbors
                for i in range(b)
            ])
            same_nb = np.stack([
                geometry.radius_neighbors(sampled[i], sampled[i], 2.0 * cfg.radius, cfg.k,
                                          seeds[i][2 * li + 1]).neighbors
                for i in range(b)
            ])
            strided, same = self.blocks[2 * li], self.blocks[2 * li + 1]
            sampled, x, t1 = strided(points, x, centroids, strided_nb, training)
            sampled, x, t2 = same(sampled, x, np.broadcast_to(np.arange(m), (b, m)), same_nb,
                                  training)
            levels.append(Level(
                sampled, x, centroids,
                neighbors={"strided": strided_nb, "same": same_nb},
                radii={"strided": cfg.radius, "same": 2.0 * cfg.radius},
                traces={"strided": t1, "same": t2},
            ))
            points = sampled
        return PyramidState(levels)


def _block_seeds(seed: int | None, batch: int, blocks: int):
    if seed is None:
        return [[None] * blocks for _ in range(batch)]
    ss = np.random.SeedSequence(seed)
    return [[np.random.default_rng(c) for c in child.spawn(blocks)] for child in ss.spawn(batch)]


class Decoder(Module):
    def __init__(self, net: NetworkConfig, rng: np.random.Generator):
        widths = [net.stem_width] + [cfg.width for cfg in net.layers]
        c = net.num_classes
        self.aux_heads = [SharedMLP(widths[-1], c, rng)]
        fuse = []
        for level in range(len(net.layers) - 1, 0, -1):
            fuse.append(SharedMLP(widths[level + 1] + widths[level], widths[level], rng,
                                  use_bn=True, use_relu=True, momentum=net.bn_momentum))
            self.aux_heads.append(SharedMLP(widths[level], c, rng))
        self.fuse = fuse
        self.out_mlp = SharedMLP(widths[1] + widths[0], widths[0], rng, use_bn=True,
                                 use_relu=True, momentum=net.bn_momentum)
        self.classifier = SharedMLP(widths[0], c, rng)

    def __call__(self, pyramid: PyramidState, training: bool = False, dropout_rate: float = 0.5,
                 rng: np.random.Generator | None = None):
        levels = pyramid.levels
        top = len(levels) - 1
        cur = levels[top].features
        aux = [self.aux_heads[0](cur, training)]
        for step, level in enumerate(range(top - 1, 0, -1)):
            up = geometry.interpolate_features(levels[level].points, levels[level + 1].points, cur)
            cur = self.fuse[step](concat([up, levels[level].features]), training)
            aux.append(self.aux_heads[step + 1](cur, training))
        up = geometry.interpolate_features(levels[0].points, levels[1].points, cur)
        x = self.out_mlp(concat([up, levels[0].features]), training)
        x = dropout(x, dropout_rate, rng, training)
        return self.classifier(x, training), aux


class SegmentationNet(Module):
    def __init__(self, net: NetworkConfig, seed: int = 0):
        self.config = net.validate()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(net, rng)
        self.decoder = Decoder(net, rng)

    def __call__(self, positions, features, training: bool = False, neighbor_seed=None,
                 dropout_rate: float = 0.5, rng=None):
        """Returns ``(main_logits [B, N, C], aux_logits, pyramid)``."""
        positions, features = _as_batch(positions, features)
        pyramid = self.encoder(positions, features, training, neighbor_seed)
        main, aux = self.decoder(pyramid, training, dropout_rate, rng)
        main.check_finite("main logits")
        return main, aux, pyramid


def _as_batch(positions, features):
    positions = np.asarray(positions, dtype=np.float64)
    if not isinstance(features, Tensor):
        features = Tensor(features)
    if positions.ndim == 2:
        positions = positions[None]
        features = _batched(features)
    return positions, features


def encoder_forward(cloud: geometry.PointCloud, net: SegmentationNet | "ClassificationNet",
                    training: bool = False, neighbor_seed=None) -> PyramidState:
    positions, features = _as_batch(cloud.positions, cloud.features())
    return net.encoder(positions, features, training, neighbor_seed)


def decoder_forward(pyramid: PyramidState, net: SegmentationNet, training: bool = False,
                    dropout_rate: float = 0.5, rng=None):
    return net.decoder(pyramid, training, dropout_rate, rng)


class ClassificationNet(Module):
    """Encoder followed by global average pooling and a classifier MLP."""

    def __init__(self, net: NetworkConfig, seed: int = 0):
        self.config = net.validate()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(net, rng)
        self.head = SharedMLP(net.layers[-1].width, net.num_classes, rng)

    def __call__(self, positions, features, training: bool = False, neighbor_seed=None):
        positions, features = _as_batch(positions, features)
        pyramid = self.encoder(positions, features, training, neighbor_seed)
        pooled = reduce(pyramid.levels[-1].features, axis=1, kind="mean")
        return self.head(pooled, training)


def classification_forward(cloud: geometry.PointCloud, net: ClassificationNet,
                           training: bool = False) -> Tensor:
    from .tensor import reshape

    logits = net(cloud.positions, cloud.features(), training)
    return reshape(logits, (logits.shape[-1],))


@dataclass
class LossTerms:
    total: Tensor
    main: float
    aux: list[float]


def composite_loss(main_logits: Tensor, aux_logits: list[Tensor], labels: np.ndarray,
                   pyramid: PyramidState, cfg: TrainConfig, main_only: bool = False) -> LossTerms:
    """Main loss plus the weighted auxiliary losses at every pyramid level.

    Auxiliary targets are the ground-truth labels of the points retained at
    each level. ``main_only`` skips the auxiliary terms altogether.
    """
    per_level = pyramid.level_labels(labels)
    main = smoothed_cross_entropy(main_logits, per_level[0], cfg.label_smoothing)
    if main_only:
        return LossTerms(main, float(main.data), [])
    levels = len(pyramid.levels) - 1
    if len(cfg.aux_weights) != len(aux_logits):
        raise ContractError(f"{len(cfg.aux_weights)} aux weights for {len(aux_logits)} aux outputs")
    total = main
    values = []
    # aux head i sits on encoder level ``levels - i``
    for i, (weight, logits) in enumerate(zip(cfg.aux_weights, aux_logits)):
        term = smoothed_cross_entropy(logits, per_level[levels - i], cfg.label_smoothing)
        values.append(float(term.data))
        total = add(total, mul(term, weight))
    return LossTerms(total, float(main.data), values)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        return cls(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {i} of shape {p.shape}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(optimizer: Adam) -> None:
    optimizer.step()
