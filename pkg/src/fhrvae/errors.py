"""
Exception hierarchy shared by every fhrvae module.
Callers catch FhrVaeError; subclasses name the failure kind.
"""

from typing import Optional


class FhrVaeError(Exception):
    """Base exception for fhrvae errors"""

    pass


class ConfigError(FhrVaeError):
    """Raised when a configuration value or key is invalid"""

    pass


class DataValidationError(FhrVaeError):
    """Raised when input data violates its declared format or invariants"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientDataError(FhrVaeError):
    """Raised when too few valid samples remain for a computation"""

    pass


class ShapeError(FhrVaeError):
    """Raised when array operands have incompatible shapes"""

    pass


class NumericalError(FhrVaeError):
    """Raised on overflow, non-finite results or out-of-domain inputs"""

    pass


class ConvergenceError(FhrVaeError):
    """Raised when an iterative procedure fails to converge"""

    pass


class CheckpointMismatchError(FhrVaeError):
    """Raised when a checkpoint does not match the requested configuration"""

    pass
