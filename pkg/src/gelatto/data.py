"""Point-cloud files, synthetic scenes, augmentation, sampling and voting."""

from __future__ import annotations

import configparser
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud

SCHEMA_TOKENS = ("xyz", "rgb", "l", "s")
BINARY_MAGIC = b"GLCLOUD\0"
BINARY_VERSION = 1


class CloudFormatError(ValueError):
    pass


class CoverageError(RuntimeError):
    pass


# -- file IO ------------------------------------------------------------------------


def parse_schema(schema: str) -> list[str]:
    tokens, rest = [], schema
    while rest:
        for tok in SCHEMA_TOKENS:
            if rest.startswith(tok):
                tokens.append(tok)
                rest = rest[len(tok):]
                break
        else:
            raise CloudFormatError(f"unknown column schema {schema!r}")
    if "xyz" not in tokens or len(set(tokens)) != len(tokens):
        raise CloudFormatError(f"schema {schema!r} needs xyz and no repeated columns")
    return tokens


_WIDTH = {"xyz": 3, "rgb": 3, "l": 1, "s": 1}


def write_cloud(cloud: PointCloud, path, scores: np.ndarray | None = None) -> None:
    """Write the ASCII format (``.pts``) or the binary variant (``.ptsb``).

    An optional per-point scalar column (``s``) carries attention scores.
    """
    path = Path(path)
    if path.suffix == ".ptsb":
        _write_binary(cloud, path, scores)
        return
    tokens = ["xyz"]
    cols = [cloud.positions]
    if cloud.colors is not None:
        tokens.append("rgb")
        cols.append(cloud.colors)
    if cloud.labels is not None:
        tokens.append("l")
    if scores is not None:
        tokens.append("s")
    with open(path, "w") as fh:
        fh.write(f"pts {len(cloud)} cols {''.join(tokens)}\n")
        for i in range(len(cloud)):
            parts = [f"{v:.9g}" for col in cols for v in col[i]]
            if cloud.labels is not None:
                parts.append(str(int(cloud.labels[i])))
            if scores is not None:
                parts.append(f"{scores[i]:.9g}")
            fh.write(" ".join(parts) + "\n")


def read_cloud(path, num_classes: int | None = None, with_scores: bool = False):
    """Parse a cloud file; returns ``(cloud, scores)`` when ``with_scores``."""
    path = Path(path)
    if path.suffix == ".ptsb":
        cloud, scores = _read_binary(path)
    else:
        cloud, scores = _read_ascii(path)
    cloud.validate(num_classes)
    return (cloud, scores) if with_scores else cloud


def _read_ascii(path: Path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "pts" or header[2] != "cols":
            raise CloudFormatError(f"{path}:1: expected 'pts <N> cols <schema>'")
        try:
            n = int(header[1])
        except ValueError:
            raise CloudFormatError(f"{path}:1: bad point count {header[1]!r}") from None
        tokens = parse_schema(header[3])
        width = sum(_WIDTH[t] for t in tokens)
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != width:
                raise CloudFormatError(f"{path}:{lineno}: expected {width} values, got {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise CloudFormatError(f"{path}:{lineno}: non-numeric value") from None
    if len(rows) != n:
        raise CloudFormatError(f"{path}: header announces {n} points, found {len(rows)}")
    table = np.array(rows, dtype=np.float64).reshape(n, width)
    cols, at = {}, 0
    for tok in tokens:
        cols[tok] = table[:, at:at + _WIDTH[tok]]
        at += _WIDTH[tok]
    labels = None
    if "l" in cols:
        raw = cols["l"][:, 0]
        if not np.all(raw == np.round(raw)):
            raise CloudFormatError(f"{path}: non-integer label")
        labels = raw.astype(np.int64)
    scores = cols["s"][:, 0] if "s" in cols else None
    return PointCloud(cols["xyz"], cols.get("rgb"), labels), scores


def _write_binary(cloud: PointCloud, path: Path, scores) -> None:
    arrays = {"xyz": cloud.positions}
    if cloud.colors is not None:
        arrays["rgb"] = cloud.colors
    if cloud.labels is not None:
        arrays["l"] = cloud.labels.astype(np.float64)[:, None]
    if scores is not None:
        arrays["s"] = np.asarray(scores, dtype=np.float64)[:, None]
    header = json.dumps({"n": len(cloud), "cols": list(arrays)}).encode()
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC + struct.pack("<IQ", BINARY_VERSION, len(header)) + header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_binary(path: Path):
    raw = path.read_bytes()
    if not raw.startswith(BINARY_MAGIC):
        raise CloudFormatError(f"{path}: not a binary cloud file")
    version, hlen = struct.unpack_from("<IQ", raw, len(BINARY_MAGIC))
    if version != BINARY_VERSION:
        raise CloudFormatError(f"{path}: unsupported version {version}")
    start = len(BINARY_MAGIC) + 12
    header = json.loads(raw[start:start + hlen])
    n, at = header["n"], start + hlen
    cols = {}
    for tok in header["cols"]:
        w = _WIDTH[tok]
        cols[tok] = np.frombuffer(raw, dtype="<f8", count=n * w, offset=at).reshape(n, w).copy()
        at += n * w * 8
    labels = cols["l"][:, 0].astype(np.int64) if "l" in cols else None
    scores = cols["s"][:, 0] if "s" in cols else None
    return PointCloud(cols["xyz"], cols.get("rgb"), labels), scores


# -- synthetic scenes -----------------------------------------------------------------


@dataclass
class ScenePart:
    label: int
    kind: str  # floor | wall_x | wall_y | sphere | box
    points: int
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    radius: float = 0.3
    size: tuple[float, float, float] = (0.4, 0.4, 0.4)


def _toy_parts(points: int) -> list[ScenePart]:
    per = [points // 3 + (1 if i < points % 3 else 0) for i in range(3)]
    return [
        ScenePart(0, "floor", per[0], (0.55, 0.45, 0.35)),
        ScenePart(1, "wall", per[1], (0.8, 0.8, 0.75)),
        ScenePart(2, "sphere", per[2], (0.8, 0.2, 0.2), radius=0.3),
    ]


@dataclass
class SceneSpec:
    seed: int = 0
    extent: tuple[float, float, float] = (1.9, 1.9, 1.5)
    noise: float = 0.005
    color_noise: float = 0.05
    wall_base: float = 0.1
    parts: list[ScenePart] = field(default_factory=lambda: _toy_parts(2048))

    @property
    def num_classes(self) -> int:
        return max(p.label for p in self.parts) + 1

    def validate(self) -> "SceneSpec":
        if min(self.extent) <= 0:
            raise ValueError("scene extents must be positive")
        if len({p.label for p in self.parts}) < 2 and len(self.parts) > 1:
            raise ValueError("parts must cover at least two classes")
        if any(p.points <= 0 for p in self.parts):
            raise ValueError("every part needs a positive point count")
        return self

    @classmethod
    def parse(cls, text: str) -> "SceneSpec":
        """Read the key-value form: a ``[scene]`` section plus one ``[part.*]`` per part."""
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        cp.read_string(text)
        spec = cls(parts=[])
        if cp.has_section("scene"):
            sec = cp["scene"]
            for key in sec:
                if key == "seed":
                    spec.seed = sec.getint(key)
                elif key == "extent":
                    spec.extent = tuple(float(v) for v in sec[key].split())
                elif key in ("noise", "color_noise", "wall_base"):
                    setattr(spec, key, sec.getfloat(key))
                else:
                    raise ValueError(f"unknown scene key {key!r}")
        for name in cp.sections():
            if not name.startswith("part."):
                if name != "scene":
                    raise ValueError(f"unknown section [{name}]")
                continue
            sec = cp[name]
            kw = {}
            for key in sec:
                if key in ("label", "points"):
                    kw[key] = sec.getint(key)
                elif key == "kind":
                    kw[key] = sec[key]
                elif key == "radius":
                    kw[key] = sec.getfloat(key)
                elif key in ("color", "size"):
                    kw[key] = tuple(float(v) for v in sec[key].split())
                else:
                    raise ValueError(f"unknown part key {key!r} in [{name}]")
            spec.parts.append(ScenePart(**kw))
        if not spec.parts:
            spec.parts = _toy_parts(2048)
        return spec.validate()

    def dumps(self) -> str:
        out = io.StringIO()
        out.write(f"[scene]\nseed = {self.seed}\nextent = {' '.join(map(repr, self.extent))}\n")
        out.write(f"noise = {self.noise!r}\ncolor_noise = {self.color_noise!r}\n")
        out.write(f"wall_base = {self.wall_base!r}\n")
        for i, p in enumerate(self.parts):
            out.write(f"\n[part.{i}]\nlabel = {p.label}\nkind = {p.kind}\npoints = {p.points}\n")
            out.write(f"color = {' '.join(map(repr, p.color))}\nradius = {p.radius!r}\n")
            out.write(f"size = {' '.join(map(repr, p.size))}\n")
        return out.getvalue()


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample labelled points on the described surfaces (deterministic in the seed).

    The floor is z = 0; walls stand on the x = 0 and y = 0 planes and start
    at ``wall_base``; spheres and boxes float clear of floor and walls.
    """
    return _generate(spec)[0]


def _generate(spec: SceneSpec):
    spec.validate()
    layout = []
    rng = np.random.default_rng(spec.seed)
    ex, ey, ez = spec.extent
    pos, col, lab = [], [], []
    for part in spec.parts:
        n = part.points
        if part.kind == "floor":
            p = np.column_stack([rng.uniform(0, ex, n), rng.uniform(0, ey, n), np.zeros(n)])
        elif part.kind in ("wall", "wall_x", "wall_y"):
            if part.kind == "wall":
                on_x = rng.random(n) < ex / (ex + ey)
            else:
                on_x = np.full(n, part.kind == "wall_x")
            u = rng.uniform(0, 1, n)
            z = rng.uniform(spec.wall_base, ez, n)
            # wall_x runs along x at y = 0; wall_y runs along y at x = 0
            p = np.where(on_x[:, None],
                         np.column_stack([u * ex, np.zeros(n), z]),
                         np.column_stack([np.zeros(n), u * ey, z]))
        elif part.kind == "sphere":
            r = part.radius
            margin = 0.15
            c = np.array([
                rng.uniform(r + margin, ex - r - margin / 3),
                rng.uniform(r + margin, ey - r - margin / 3),
                rng.uniform(r + margin, max(r + margin, ez - r - margin)),
            ])
            p = c + r * _unit_vectors(rng, n)
            layout.append({"kind": "sphere", "label": part.label, "center": c, "radius": r})
        elif part.kind == "box":
            size = np.array(part.size)
            lo = np.array([
                rng.uniform(0.15, ex - size[0] - 0.05),
                rng.uniform(0.15, ey - size[1] - 0.05),
                0.15,
            ])
            p = _box_surface(rng, n, lo, size)
            layout.append({"kind": "box", "label": part.label, "corner": lo, "size": size})
        else:
            raise ValueError(f"unknown part kind {part.kind!r}")
        p = p + rng.normal(0.0, spec.noise, size=p.shape)
        c_rgb = np.clip(np.asarray(part.color) + rng.normal(0.0, spec.color_noise, (n, 3)), 0, 1)
        pos.append(p)
        col.append(c_rgb)
        lab.append(np.full(n, part.label, dtype=np.int64))
    cloud = PointCloud(np.concatenate(pos), np.concatenate(col), np.concatenate(lab))
    return cloud, layout


def scene_layout(spec: SceneSpec) -> list[dict]:
    """Placed primitives of a generated scene (kind, label, centre/corner, size)."""
    return _generate(spec)[1]


def _box_surface(rng, n, lo, size):
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(0, 1, (n, 3))
    axis = face % 3
    u[np.arange(n), axis] = (face >= 3).astype(float)
    return lo + u * size


# -- augmentation ----------------------------------------------------------------------


@dataclass
class AugmentOptions:
    scale: tuple[float, float] | None = (0.9, 1.1)
    flip: bool = True
    rotate: bool = True
    angle: float | None = None
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    color_permute: bool = True
    color_sigma: float = 0.02

    @classmethod
    def none(cls) -> "AugmentOptions":
        return cls(scale=None, flip=False, rotate=False, jitter_sigma=0.0,
                   color_permute=False, color_sigma=0.0)


def augment(cloud: PointCloud, seed, opts: AugmentOptions | None = None) -> PointCloud:
    """Random similarity transform, jitter and colour perturbation; labels untouched."""
    opts = opts if opts is not None else AugmentOptions()
    rng = np.random.default_rng(seed)
    p = cloud.positions.copy()
    if opts.scale is not None:
        p *= rng.uniform(*opts.scale)
    if opts.flip:
        flips = np.where(rng.random(2) < 0.5, -1.0, 1.0)
        p[:, :2] *= flips
    if opts.rotate or opts.angle is not None:
        theta = opts.angle if opts.angle is not None else rng.uniform(0, 2 * math.pi)
        c, s = math.cos(theta), math.sin(theta)
        x, y = p[:, 0].copy(), p[:, 1].copy()
        p[:, 0] = c * x - s * y
        p[:, 1] = s * x + c * y
    if opts.jitter_sigma > 0:
        p += np.clip(rng.normal(0, opts.jitter_sigma, p.shape), -opts.jitter_clip, opts.jitter_clip)
    colors = cloud.colors
    if colors is not None and (opts.color_permute or opts.color_sigma > 0):
        colors = colors.copy()
        if opts.color_permute:
            colors = colors[:, rng.permutation(3)]
        if opts.color_sigma > 0:
            colors = np.clip(colors + rng.normal(0, opts.color_sigma, colors.shape), 0.0, 1.0)
    labels = None if cloud.labels is None else cloud.labels.copy()
    return PointCloud(p, None if colors is None else colors.copy(), labels)


# -- fixed-size sampling --------------------------------------------------------------------


def _cycle(order: np.ndarray, n: int) -> np.ndarray:
    return np.resize(order, n)


def sample_fixed(cloud: PointCloud | int, n: int, seed) -> np.ndarray:
    """``n`` indices: uniform without replacement, or all points cycled when too few."""
    count = cloud if isinstance(cloud, (int, np.integer)) else len(cloud)
    if n < 1:
        raise ValueError("sample size must be at least 1")
    rng = np.random.default_rng(seed)
    if count >= n:
        return rng.choice(count, size=n, replace=False)
    return _cycle(rng.permutation(count), n)


def coverage_sampler(cloud: PointCloud | int, n: int, seed) -> list[np.ndarray]:
    """Windows of exactly ``n`` indices that together cover every point.

    A seeded permutation is cut into consecutive windows; only the last one is
    topped up with points that already appeared earlier.
    """
    count = cloud if isinstance(cloud, (int, np.integer)) else len(cloud)
    if n < 1:
        raise ValueError("window size must be at least 1")
    perm = np.random.default_rng(seed).permutation(count)
    windows = [perm[i:i + n] for i in range(0, count, n)]
    if len(windows) == 1:
        windows[0] = _cycle(perm, n)
    elif len(windows[-1]) < n:
        windows[-1] = np.concatenate([windows[-1], perm[: n - len(windows[-1])]])
    return windows


# -- voting --------------------------------------------------------------------------------


@dataclass
class VoteAccumulator:
    sums: np.ndarray
    coverage: np.ndarray

    @classmethod
    def create(cls, n_points: int, num_classes: int) -> "VoteAccumulator":
        return cls(np.zeros((n_points, num_classes)), np.zeros(n_points, dtype=np.int64))

    def update(self, window: np.ndarray, softmax: np.ndarray) -> None:
        softmax = np.asarray(softmax, dtype=np.float64)
        if softmax.shape != (len(window), self.sums.shape[1]):
            raise ValueError(f"softmax {softmax.shape} for a window of {len(window)}")
        if not np.allclose(softmax.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise ValueError("softmax rows must sum to 1")
        np.add.at(self.sums, window, softmax)
        np.add.at(self.coverage, window, 1)

    def finalize(self) -> np.ndarray:
        missing = np.flatnonzero(self.coverage == 0)
        if missing.size:
            raise CoverageError(f"{missing.size} points never voted (first: {int(missing[0])})")
        return np.argmax(self.sums, axis=1)


def vote_update(acc: VoteAccumulator, window, softmax) -> VoteAccumulator:
    acc.update(np.asarray(window), softmax)
    return acc


def vote_finalize(acc: VoteAccumulator) -> np.ndarray:
    return acc.finalize()

