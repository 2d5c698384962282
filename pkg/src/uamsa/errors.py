"""Exception hierarchy shared by every module."""


class UamsaError(Exception):
    """Base class for all package errors."""


class ShapeError(UamsaError):
    """Operand shapes are incompatible."""


class GeometryError(UamsaError):
    """Spatial sizes do not admit the requested operation."""


class ParameterError(UamsaError, ValueError):
    """An argument lies outside its admissible range."""


class TapeError(UamsaError):
    """Misuse of the autodiff tape (foreign tensor, double backward, ...)."""


class NumericalError(UamsaError):
    """A NaN/Inf appeared where finite values are required."""


class FormatError(UamsaError):
    """A file does not follow its on-disk format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(FormatError):
    """Checkpoint tensor names disagree with the model spec."""

    def __init__(self, missing=(), unexpected=()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        parts = []
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected: " + ", ".join(self.unexpected))
        super().__init__("checkpoint schema mismatch; " + "; ".join(parts))


class ConfigError(UamsaError):
    """Invalid run configuration."""
