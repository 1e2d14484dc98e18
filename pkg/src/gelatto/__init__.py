"""Point-cloud semantic segmentation with two-headed geometric/latent attention."""

from .config import RunConfig, toy_config
from .geometry import PointCloud
from .network import LayerConfig, NetworkConfig, SegmentationNet, TrainConfig
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "LayerConfig",
    "NetworkConfig",
    "PointCloud",
    "RunConfig",
    "SegmentationNet",
    "Tape",
    "Tensor",
    "TrainConfig",
    "toy_config",
]
