"""Broadcast semantic communication: one transmitter serving several task-specific receivers."""

from .channel import ChannelSpec, power_normalize, transmit
from .config import ExperimentConfig, expand_preset, load_config
from .nets import ModelConfig, build_variant
from .objective import LossWeights, broadcast_ib_loss, kl_to_standard_normal

__all__ = [
    "ChannelSpec", "power_normalize", "transmit", "ExperimentConfig", "expand_preset", "load_config",
    "ModelConfig", "build_variant", "LossWeights", "broadcast_ib_loss", "kl_to_standard_normal",
]
__version__ = "0.1.0"
