"""Run configuration: sectioned key-value files with strict validation."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .network import LayerConfig, NetworkConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    points: int = 6144
    block_size: float = 2.0
    augment: bool = True
    eval_points: int = 6144
    num_train: int = 64
    num_test: int = 16


@dataclass
class RunOptions:
    data: str = "data"
    checkpoint: str = ""
    out: str = "out"
    seed: int = 0
    deterministic: bool = False
    threads: int = 1
    target_miou: float = 0.0
    val_every: int = 1


@dataclass
class RunConfig:
    run: RunOptions = field(default_factory=RunOptions)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        try:
            self.network.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.train.aux_weights) != len(self.network.layers):
            raise ConfigError(f"{len(self.train.aux_weights)} aux weights for "
                              f"{len(self.network.layers)} encoder layers")
        if self.data.points < 8 or self.data.eval_points < 8 or self.data.block_size <= 0:
            raise ConfigError("data.points/eval_points must be >= 8 and block_size positive")
        if self.run.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self


def toy_config(**overrides) -> RunConfig:
    """Desk-scale network and data sizes for the synthetic three-class scenes."""
    cfg = RunConfig(
        network=NetworkConfig(
            num_classes=3,
            stem_width=16,
            layers=[
                LayerConfig(512, 0.10, 32, 32),
                LayerConfig(256, 0.20, 32, 64),
                LayerConfig(128, 0.40, 32, 128),
                LayerConfig(64, 0.80, 16, 256),
            ],
        ),
        data=DataConfig(points=2048, eval_points=2048),
    )
    for key, value in overrides.items():
        section, name = key.split("__")
        setattr(getattr(cfg, section), name, value)
    return cfg


# -- text form -------------------------------------------------------------------------

_LAYER_KEYS = {"samples": "sample_count", "radii": "radius", "neighbors": "k", "widths": "width"}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_fmt(v) for v in value)
    return str(value)


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(float(v) for v in raw.split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def dumps(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["run"] = {f.name: _fmt(getattr(cfg.run, f.name)) for f in fields(RunOptions)}
    net = cfg.network
    section = {f.name: _fmt(getattr(net, f.name)) for f in fields(NetworkConfig) if f.name != "layers"}
    for key, attr in _LAYER_KEYS.items():
        section[key] = _fmt([getattr(layer, attr) for layer in net.layers])
    section["bottlenecks"] = _fmt([layer.bottleneck for layer in net.layers])
    cp["network"] = section
    cp["train"] = {f.name: _fmt(getattr(cfg.train, f.name)) for f in fields(TrainConfig)}
    cp["data"] = {f.name: _fmt(getattr(cfg.data, f.name)) for f in fields(DataConfig)}
    out = io.StringIO()
    cp.write(out)
    return out.getvalue()


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse a config file over ``base`` (defaults when omitted); unknown keys are errors."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = base if base is not None else RunConfig()
    known = {"run": cfg.run, "network": cfg.network, "train": cfg.train, "data": cfg.data}
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
    for name, target in known.items():
        if not cp.has_section(name):
            continue
        sec = cp[name]
        if name == "network":
            _load_layers(sec, cfg.network)
        for key in sec:
            if name == "network" and (key in _LAYER_KEYS or key == "bottlenecks"):
                continue
            if key not in {f.name for f in fields(target)} or key == "layers":
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(target, key, _coerce(sec[key], getattr(target, key), f"{name}.{key}"))
    return cfg.validate()


def _load_layers(sec, net: NetworkConfig) -> None:
    given = {k: sec[k].split() for k in list(_LAYER_KEYS) + ["bottlenecks"] if k in sec}
    if not given:
        return
    count = {len(v) for v in given.values()}
    if len(count) != 1:
        raise ConfigError("per-layer lists must all have the same length")
    n = count.pop()
    layers = [LayerConfig(**vars(layer)) for layer in net.layers]
    if len(layers) != n:
        if len(given) < len(_LAYER_KEYS):
            raise ConfigError("changing the layer count needs samples, radii, neighbors and widths")
        layers = [LayerConfig(0, 0.0, 0, 0) for _ in range(n)]
    try:
        for key, values in given.items():
            attr = "bottleneck" if key == "bottlenecks" else _LAYER_KEYS[key]
            cast = float if attr == "radius" else int
            for layer, v in zip(layers, values):
                setattr(layer, attr, cast(v))
    except ValueError as exc:
        raise ConfigError(f"bad per-layer value: {exc}") from None
    net.layers = layers
