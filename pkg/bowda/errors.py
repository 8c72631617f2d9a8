"""
Exception hierarchy.

Every error raised by the toolkit derives from BowdaError and from the
builtin that describes the same situation, so callers can catch either.
"""

from typing import Optional


class BowdaError(Exception):
    """Base class for all toolkit errors."""


class MetaImageError(BowdaError, ValueError):
    """Malformed or unsupported MetaImage header/payload."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        if key:
            message = f"{message} (header key: {key})"
        super().__init__(message)


class ShapeMismatchError(BowdaError, ValueError):
    """Arrays or volumes that must share a geometry do not."""


class DegenerateVarianceError(BowdaError, ValueError):
    """Population variance too small to normalise by."""


class DegenerateMaskError(BowdaError, ValueError):
    """Mask is all-foreground or all-background where a boundary is required."""


class ConfigMismatchError(BowdaError, ValueError):
    """Checkpoint config digest does not match the requested architecture."""


class NonFiniteError(BowdaError, ArithmeticError):
    """A gradient or loss value became NaN/inf."""

    def __init__(self, message: str, name: Optional[str] = None):
        self.name = name
        super().__init__(message)


class CropError(BowdaError, ValueError):
    """Requested crop or window does not fit the volume."""


class SpecValidationError(BowdaError, ValueError):
    """Experiment spec or command-line arguments failed validation."""
