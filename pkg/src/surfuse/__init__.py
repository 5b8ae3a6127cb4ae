"""Vision/tactile surface classification with learnable late fusion, on a small numpy autodiff core."""

from .tensor import (
    ConfigError,
    NumericError,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    make_rng,
    precision,
)
from .model import (
    FusionWeights,
    ModelOutput,
    SurformerModel,
    TactileBranchConfig,
    VisionBranchConfig,
    apply_freeze_policy,
    count_parameters,
    fuse,
    predict,
)
from .training import TrainConfig, TrainLog, composite_loss, fit

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FusionWeights",
    "ModelOutput",
    "NumericError",
    "Parameter",
    "ShapeError",
    "SurformerModel",
    "TactileBranchConfig",
    "Tape",
    "TapeError",
    "Tensor",
    "TrainConfig",
    "TrainLog",
    "VisionBranchConfig",
    "apply_freeze_policy",
    "backward",
    "composite_loss",
    "count_parameters",
    "fit",
    "fuse",
    "make_rng",
    "precision",
    "predict",
]
