"""Ordinal distribution regression for silhouette-based age estimation."""

from .errors import (AgeRangeError, CheckpointError, ConfigError, DomainError,
                     GaitAgeError, IngestError, NonFiniteError, TrainingError)
from .model import GlcnnModel, ModelConfig, audit_shapes, build, crop_parts
from .ordinal import OrdinalTarget, RankSpec, decode, encode

__version__ = "0.1.0"

__all__ = [
    "AgeRangeError", "CheckpointError", "ConfigError", "DomainError",
    "GaitAgeError", "IngestError", "NonFiniteError", "TrainingError",
    "GlcnnModel", "ModelConfig", "audit_shapes", "build", "crop_parts",
    "OrdinalTarget", "RankSpec", "decode", "encode",
    "__version__",
]
