"""Exemplar-based material transfer via guided diffusion sampling."""

from .core import (
    BinaryMask,
    ConfigError,
    ImageRGB,
    InversionTrajectory,
    LatentState,
    PromptSet,
    TransferConfig,
    ValidationError,
    make_config,
)
from .denoiser import (
    BackendLoadError,
    Conditioning,
    DenoiserBackend,
    MaterialEmbedding,
    load_pretrained_backend,
    make_toy_backend,
)

__all__ = [
    "BinaryMask",
    "ConfigError",
    "ImageRGB",
    "InversionTrajectory",
    "LatentState",
    "PromptSet",
    "TransferConfig",
    "ValidationError",
    "make_config",
    "BackendLoadError",
    "Conditioning",
    "DenoiserBackend",
    "MaterialEmbedding",
    "load_pretrained_backend",
    "make_toy_backend",
]

__version__ = "0.1.0"
