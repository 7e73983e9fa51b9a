"""Static attention, global token aggregation and FLOPs-constrained architecture search for toy ViTs."""

from .engine import ArchitectureConfig, VitSpec, model_forward
from .errors import (ConfigError, DegenerateInputError, InfeasibleError, NumericError, ShapeError,
                     SingularMatrixError, VitSqueezeError)
from .flops import flops_total
from .solver import SearchProblem, accuracy_metric, solve_architecture

__version__ = "0.1.0"

__all__ = ["ArchitectureConfig", "VitSpec", "model_forward", "ConfigError", "DegenerateInputError",
           "InfeasibleError", "NumericError", "ShapeError", "SingularMatrixError", "VitSqueezeError",
           "flops_total", "SearchProblem", "accuracy_metric", "solve_architecture"]
