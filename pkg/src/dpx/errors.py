"""Exception types shared across the package."""


class DpxError(Exception):
    """Base class for all package errors."""


class DimensionError(DpxError):
    """Shapes or axes of the operands are incompatible."""


class PrecisionError(DpxError):
    """Operands have mismatched numeric precision."""


class DomainError(DpxError):
    """Input values are outside the operation's domain."""


class ConfigError(DpxError):
    """A configuration value is invalid or inconsistent."""


class StateError(DpxError):
    """Operation called in the wrong order (e.g. backward before forward)."""
