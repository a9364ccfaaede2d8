"""Invertible image rescaling with a stored high-frequency latent."""
from .invnet import SplitMode, SplitSpec
from .latent_codec import AeConfig
from .model import ModelConfig, RescaleArtifact, RescaleModel, Variant, load_checkpoint, save_checkpoint

__all__ = [
    "AeConfig", "ModelConfig", "RescaleArtifact", "RescaleModel", "SplitMode", "SplitSpec",
    "Variant", "load_checkpoint", "save_checkpoint",
]
__version__ = "0.1.0"
