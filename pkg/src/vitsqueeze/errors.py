"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class VitSqueezeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(VitSqueezeError, ValueError):
    pass


class ParameterError(VitSqueezeError, ValueError):
    pass


class ConfigError(VitSqueezeError, ValueError):
    pass


class DegenerateInputError(VitSqueezeError, ValueError):
    pass


class NumericError(VitSqueezeError, ArithmeticError):
    pass


class SingularMatrixError(NumericError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class ConvergenceError(NumericError):
    pass


class InfeasibleError(VitSqueezeError, RuntimeError):
    def __init__(self, message: str, min_ratio: float):
        super().__init__(f"{message}; minimum achievable FLOPs ratio is {min_ratio:.6f}")
        self.min_ratio = min_ratio


class TrainingDivergenceError(NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at optimisation step {step}")
        self.step = step
        self.loss = loss
