"""Low-rank Mamba super-resolution with knowledge distillation, on a numpy autodiff core."""

from .errors import (CheckpointError, ConfigurationError, DimensionError, MambaLiteError, NumericalError,
                     UsageError)
from .model import PRESETS, STUDENT, TEACHER, ModelConfig, SrModel, build_model, count_params, estimate_flops
from .tensor import Tape, Tensor, backward, no_grad, parameter
from .train import TrainConfig, distill_student, train_teacher

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigurationError", "DimensionError", "MambaLiteError", "NumericalError", "UsageError",
    "PRESETS", "STUDENT", "TEACHER", "ModelConfig", "SrModel", "build_model", "count_params", "estimate_flops",
    "Tape", "Tensor", "backward", "no_grad", "parameter",
    "TrainConfig", "distill_student", "train_teacher",
]
