"""Exception and warning types shared across the toolkit."""


class UwsdfError(Exception):
    """Base class for all toolkit errors."""


class FormatError(UwsdfError):
    """File contents do not match the expected format."""


class TruncationError(FormatError):
    """File ended before the declared payload was complete."""


class IoError(UwsdfError):
    """Underlying read/write failure."""


class ValidationError(UwsdfError):
    """Value violates a documented invariant or precondition."""


class ConfigError(ValidationError):
    """Configuration value has the wrong type or an illegal value."""


class BoundsError(ValidationError):
    """Coordinate outside the valid range."""


class DegenerateSceneError(ValidationError):
    """Camera set too degenerate to normalize (coincident or too few)."""


class ShapeError(ValidationError):
    """Array dimensions do not match the expected shape."""


class NumericError(UwsdfError):
    """Non-finite value where a finite one is required."""


class MissError(UwsdfError):
    """Ray does not intersect the bounding volume."""


class EmptyMaskError(ValidationError):
    """Binary mask has no foreground pixels."""


class EmptySurfaceError(UwsdfError):
    """Scalar field has no zero crossing inside the sampled bounds."""


class ViewSkippedWarning(UserWarning):
    """A dataset view was skipped (e.g. empty foreground mask)."""
