"""Exception types shared across the package."""


class DhmpError(Exception):
    """Base class for all errors raised by this package."""


class MeshError(DhmpError):
    """Invalid mesh topology or graph operation input."""


class ShapeError(DhmpError):
    """Incompatible array shapes or indices passed to an operation."""


class NumericError(DhmpError):
    """Non-finite values produced by a numeric operation."""


class StabilityError(DhmpError):
    """Solver time step violates its stability bound."""


class ConfigError(DhmpError):
    """Invalid or inconsistent user configuration."""


class TrainAbort(DhmpError):
    """Training aborted; carries diagnostics for the failing step."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
