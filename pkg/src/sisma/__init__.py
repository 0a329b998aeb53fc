"""Mask-conditioned selective state-space flow-matching model for semantic image synthesis."""

from .errors import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigError,
    MaskError,
    NumericError,
    PreconditionError,
    ShapeError,
    SismaError,
    ValidationError,
)
from .model import ModelConfig, PRESETS, build_model, count_params, ema_update, forward_velocity, preset

__version__ = "0.1.0"
