"""Exception hierarchy for the sdemap package."""

from typing import Optional


class SdeMapError(Exception):
    """Base class for every error raised by sdemap."""


class DomainError(SdeMapError, ValueError):
    """An argument lies outside the domain of the function."""


class InputError(SdeMapError, ValueError):
    """Malformed input data (datasets, partitions, model shapes)."""


class EvaluationError(SdeMapError):
    """A model map returned a non-finite value during a recursion."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class FixedPointError(SdeMapError):
    """Picard iteration of the trapezoidal clean-state step did not converge."""

    def __init__(self, message: str, step: int, residual: float):
        super().__init__(message)
        self.step = step
        self.residual = residual


class GradientError(SdeMapError):
    """Gradient requested where the objective is not finite."""


class NumericalError(SdeMapError):
    """A covariance or normal matrix failed its factorization."""

    def __init__(self, message: str, node: Optional[int] = None):
        super().__init__(message)
        self.node = node


class ConfigError(SdeMapError):
    """An experiment configuration failed validation."""

    def __init__(self, message: str, field: str = ''):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
