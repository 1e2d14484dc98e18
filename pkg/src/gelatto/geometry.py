"""Spatial primitives: sampling, radius grouping, interpolation, blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor, gather_rows, mul, reduce

INTERP_EPS = 1e-8


class EmptyNeighborhoodError(ValueError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def validate(self, num_classes: int | None = None) -> "PointCloud":
        n = len(self)
        if n < 1:
            raise ContractError("point cloud is empty")
        if not np.all(np.isfinite(self.positions)):
            raise ContractError("non-finite positions")
        for name, arr in (("colors", self.colors), ("labels", self.labels)):
            if arr is not None and arr.shape[0] != n:
                raise ContractError(f"{name} has {arr.shape[0]} rows for {n} points")
        if self.labels is not None and self.labels.size:
            if self.labels.min() < 0 or (num_classes is not None and self.labels.max() >= num_classes):
                raise ContractError(f"labels outside [0, {num_classes})")
        return self

    def subset(self, index: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.positions[index],
            None if self.colors is None else self.colors[index],
            None if self.labels is None else self.labels[index],
        )

    def features(self) -> np.ndarray:
        """Network input channels: xyz then rgb (zeros when colors are absent)."""
        rgb = np.zeros_like(self.positions) if self.colors is None else self.colors
        return np.concatenate([self.positions, rgb], axis=1)


@dataclass
class NeighborIndex:
    centroids: np.ndarray
    neighbors: np.ndarray
    radius: float
    k: int


@dataclass
class GridIndex:
    """Uniform hash grid over a point set; cell size is the query radius."""

    cell: float
    origin: np.ndarray
    keys: np.ndarray = field(repr=False)
    order: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)
    ends: np.ndarray = field(repr=False)
    cells: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, points: np.ndarray, cell: float) -> "GridIndex":
        origin = points.min(axis=0) - cell
        coords = np.floor((points - origin) / cell).astype(np.int64)
        keys = _cell_key(coords)
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        cells, starts = np.unique(sorted_keys, return_index=True)
        ends = np.append(starts[1:], len(order))
        return cls(cell, origin, keys, order, starts, ends, cells)

    def members(self) -> dict[tuple[int, int, int], np.ndarray]:
        """Cell coordinates mapped to the indices of the points they hold."""
        out = {}
        for key, s, e in zip(self.cells, self.starts, self.ends):
            out[_key_cell(int(key))] = self.order[s:e]
        return out

    def candidate_pairs(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """All (query, point) pairs whose cells are adjacent (3x3x3 stencil)."""
        qc = np.floor((queries - self.origin) / self.cell).astype(np.int64)
        q_out, p_out = [], []
        qidx = np.arange(len(queries))
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    keys = _cell_key(qc + np.array([dx, dy, dz]))
                    pos = np.searchsorted(self.cells, keys)
                    pos_c = np.minimum(pos, len(self.cells) - 1)
                    hit = self.cells[pos_c] == keys
                    if not hit.any():
                        continue
                    s, e = self.starts[pos_c[hit]], self.ends[pos_c[hit]]
                    counts = e - s
                    q_rep = np.repeat(qidx[hit], counts)
                    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
                    q_out.append(q_rep)
                    p_out.append(self.order[np.repeat(s, counts) + offs])
        if not q_out:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.concatenate(q_out), np.concatenate(p_out)


_KEY_BITS = 21
_KEY_BIAS = 1 << (_KEY_BITS - 1)


def _cell_key(coords: np.ndarray) -> np.ndarray:
    c = coords + _KEY_BIAS
    return (c[..., 0] << (2 * _KEY_BITS)) | (c[..., 1] << _KEY_BITS) | c[..., 2]


def _key_cell(key: int) -> tuple[int, int, int]:
    mask = (1 << _KEY_BITS) - 1
    return (
        (key >> (2 * _KEY_BITS)) - _KEY_BIAS,
        ((key >> _KEY_BITS) & mask) - _KEY_BIAS,
        (key & mask) - _KEY_BIAS,
    )


def _lexmin(candidates: np.ndarray, positions: np.ndarray) -> int:
    if len(candidates) == 1:
        return int(candidates[0])
    p = positions[candidates]
    # lexsort: last key is primary; index breaks exact duplicates
    order = np.lexsort((candidates, p[:, 2], p[:, 1], p[:, 0]))
    return int(candidates[order[0]])


def farthest_point_sample(positions: np.ndarray, m: int) -> np.ndarray:
    """Greedy farthest point sampling, returned in pick order.

    The first pick is the point nearest the cloud centroid; every later pick
    maximises the distance to the already chosen set. Ties go to the
    lexicographically smallest position, so the chosen set does not depend on
    input order.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"cannot sample {m} of {n} points")
    # exactly rounded sums keep the centroid independent of point order
    centroid = np.array([math.fsum(positions[:, j]) / n for j in range(3)])
    d0 = ((positions - centroid) ** 2).sum(axis=1)
    first = _lexmin(np.flatnonzero(d0 == d0.min()), positions)
    picks = np.empty(m, dtype=np.int64)
    picks[0] = first
    x, y, z = (np.ascontiguousarray(positions[:, j]) for j in range(3))
    mind = np.full(n, np.inf)
    tmp = np.empty(n)
    acc = np.empty(n)
    nxt = first
    for i in range(1, m):
        px, py, pz = positions[nxt]
        np.subtract(x, px, out=tmp)
        np.multiply(tmp, tmp, out=acc)
        np.subtract(y, py, out=tmp)
        acc += tmp * tmp
        np.subtract(z, pz, out=tmp)
        acc += tmp * tmp
        np.minimum(mind, acc, out=mind)
        nxt = int(np.argmax(mind))
        best = mind[nxt]
        if np.count_nonzero(mind == best) > 1:
            nxt = _lexmin(np.flatnonzero(mind == best), positions)
        picks[i] = nxt
    return picks


def _select_neighbors(q, p, d2, source, m, k, rng):
    """Order candidate pairs per query and cut/pad each row to ``k`` entries."""
    if rng is None:
        order = np.lexsort((p, source[p, 2], source[p, 1], source[p, 0], d2, q))
    else:
        order = np.lexsort((rng.random(len(q)), q))
    q, p = q[order], p[order]
    counts = np.bincount(q, minlength=m)
    if np.any(counts == 0):
        bad = int(np.flatnonzero(counts == 0)[0])
        raise EmptyNeighborhoodError(f"query {bad} has no source point inside the radius")
    starts = np.cumsum(counts) - counts
    slot = np.arange(k)
    # cycle through the candidate list when it is shorter than k
    cols = slot[None, :] % counts[:, None]
    return p[starts[:, None] + cols]


def radius_neighbors(
    queries: np.ndarray,
    source: np.ndarray,
    radius: float,
    k: int,
    seed: int | np.random.Generator | None = None,
    centroids: np.ndarray | None = None,
) -> NeighborIndex:
    """K neighbours inside a ball (inclusive) around every query.

    With ``seed=None`` the K nearest candidates are taken (distance, then
    lexicographic position). Otherwise K candidates are drawn uniformly without
    replacement. Short candidate lists are padded by cycling.
    """
    if radius <= 0 or k < 1:
        raise ContractError("radius must be positive and k >= 1")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    grid = GridIndex.build(source, radius)
    q, p = grid.candidate_pairs(queries)
    diff = queries[q] - source[p]
    d2 = (diff * diff).sum(axis=1)
    inside = d2 <= radius * radius
    q, p, d2 = q[inside], p[inside], d2[inside]
    rng = None if seed is None else np.random.default_rng(seed)
    nbrs = _select_neighbors(q, p, d2, source, len(queries), k, rng)
    if centroids is None:
        centroids = np.arange(len(queries))
    return NeighborIndex(np.asarray(centroids), nbrs, float(radius), int(k))


def brute_force_ball(queries: np.ndarray, source: np.ndarray, radius: float) -> list[set[int]]:
    """O(N*M) reference: the set of source indices inside each query's ball."""
    d2 = ((queries[:, None, :] - source[None, :, :]) ** 2).sum(axis=-1)
    return [set(np.flatnonzero(row <= radius * radius).tolist()) for row in d2]


def interpolation_weights(targets: np.ndarray, sources: np.ndarray, eps: float = INTERP_EPS):
    """Indices ``[Nt, k]`` and inverse-distance weights of the k<=3 nearest sources."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    sources = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
    ns = len(sources)
    if ns < 1:
        raise ContractError("interpolation needs at least one source point")
    k = min(3, ns)
    # expanded form for selection; exact distances are recomputed per pair
    d2 = (targets * targets).sum(axis=1)[:, None] + (sources * sources).sum(axis=1)[None, :]
    d2 -= 2.0 * (targets @ sources.T)
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1 : k]
    t, s = np.nonzero(d2 <= kth)
    diff = targets[t] - sources[s]
    dd = (diff * diff).sum(axis=1)
    order = np.lexsort((s, sources[s, 2], sources[s, 1], sources[s, 0], dd, t))
    t, s, dd = t[order], s[order], dd[order]
    counts = np.bincount(t, minlength=len(targets))
    starts = np.cumsum(counts) - counts
    pick = starts[:, None] + np.arange(k)[None, :]
    idx = s[pick]
    inv = 1.0 / (np.sqrt(dd[pick]) + eps)
    w = inv / inv.sum(axis=1, keepdims=True)
    return idx, w


def interpolate_features(
    targets: np.ndarray,
    sources: np.ndarray,
    features: Tensor,
    weights: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """3-NN inverse-distance interpolation of source features onto targets.

    Batched when ``features`` is ``[B, Ns, D]``; positions are then
    ``[B, N, 3]``.
    """
    if weights is None:
        if features.ndim == 3:
            pairs = [interpolation_weights(t, s) for t, s in zip(targets, sources)]
            weights = (np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))
        else:
            weights = interpolation_weights(targets, sources)
    idx, w = weights
    gathered = gather_rows(features, idx)
    return reduce(mul(gathered, w[..., None]), axis=-2, kind="sum")


def partition_blocks(cloud: PointCloud, block_xy: float) -> list[np.ndarray]:
    """Split into xy columns of side ``block_xy`` anchored at the min corner."""
    if block_xy <= 0:
        raise ContractError("block size must be positive")
    xy = cloud.positions[:, :2]
    cell = np.floor((xy - xy.min(axis=0)) / block_xy).astype(np.int64)
    _, inverse = np.unique(cell, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.flatnonzero(np.diff(inverse[order])) + 1
    return [chunk for chunk in np.split(order, bounds) if len(chunk)]


def normalize_block(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centre xy on the block's bounding box and put the lowest z at 0.

    Returns the normalised points and the offset to add back.
    """
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    offset = np.array([(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, lo[2]])
    return points - offset, offset


def denormalize_block(points: np.ndarray, offset: np.ndarray) -> np.ndarray:
    return points + offset
