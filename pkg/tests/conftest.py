import numpy as np
import pytest

from gelatto.config import RunConfig
from gelatto.data import SceneSpec, _toy_parts, generate_scene
from gelatto.network import LayerConfig, NetworkConfig, TrainConfig

ACCEPTANCE_LINES: list[str] = []

SMALL_CONFIG_TEXT = """\
[network]
num_classes = 3
stem_width = 8
samples = 64 32
radii = 0.3 0.6
neighbors = 8 8
widths = 16 16
bottlenecks = 2 2

[train]
aux_weights = 0.4 0.4
epochs = 2

[data]
points = 256
eval_points = 256
"""


def small_run_config(**kw) -> RunConfig:
    cfg = RunConfig(
        network=NetworkConfig(
            num_classes=3,
            stem_width=8,
            layers=[LayerConfig(64, 0.3, 8, 16, 2), LayerConfig(32, 0.6, 8, 16, 2)],
        ),
        train=TrainConfig(aux_weights=(0.4, 0.4), epochs=2),
    )
    cfg.data.points = cfg.data.eval_points = 256
    for key, value in kw.items():
        section, name = key.split("__")
        setattr(getattr(cfg, section), name, value)
    return cfg.validate()


def small_scene(seed: int, points: int = 256):
    return generate_scene(SceneSpec(seed=seed, parts=_toy_parts(points)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
