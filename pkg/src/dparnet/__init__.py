"""Degradation-parameter-assisted wide & deep restoration of image sequences."""
from .core import (
    ConfigurationError,
    DataIOError,
    DegradationKind,
    FormatError,
    NumericalError,
    ParamMap,
    Sequence,
    SmoothFieldSpec,
    smooth_random_field,
)
from .degrade import DegradationSpec, apply_noise, apply_turbulence, gen_param_map
from .estimators import DparNetRestorer, ParamMapEstimator
from .models import DparNet, ModelConfig, ParamNet, Variant
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DataIOError", "DegradationKind", "FormatError", "NumericalError",
    "ParamMap", "Sequence", "SmoothFieldSpec", "smooth_random_field",
    "DegradationSpec", "apply_noise", "apply_turbulence", "gen_param_map",
    "DparNetRestorer", "ParamMapEstimator", "DparNet", "ModelConfig", "ParamNet", "Variant",
    "TrainConfig",
]
