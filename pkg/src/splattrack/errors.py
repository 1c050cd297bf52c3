"""Exception types shared across the package."""


class SplatTrackError(Exception):
    """Base class for all package errors."""


class BehindCameraError(SplatTrackError):
    """Point has depth at or below the projection z guard."""


class JointOutOfRangeError(SplatTrackError):
    """Joint vector violates the model's box limits beyond tolerance."""


class ModelValidationError(SplatTrackError):
    """Tool-model file or construction violates an invariant.

    Carries a path-like ``locator`` identifying the first offending field.
    """

    def __init__(self, locator: str, reason: str):
        self.locator = locator
        self.reason = reason
        super().__init__(f"{locator}: {reason}")


class DimensionMismatchError(SplatTrackError):
    """Image operands do not share dimensions."""


class StaleCacheError(SplatTrackError):
    """Backward pass invoked with a cache from a different render call."""


class RenderError(SplatTrackError):
    """Renderer could not produce a usable output."""


class EmptyMaskError(SplatTrackError):
    """Segmentation mask contains no foreground pixels."""


class AllCandidatesDivergedError(SplatTrackError):
    """Every coarse candidate produced an empty rendering (infinite loss)."""


class NonFiniteLossError(SplatTrackError):
    """Optimization loss became NaN or infinite."""


class InsufficientViewsError(SplatTrackError):
    """Canonical model fitting needs at least two views."""


class LengthMismatchError(SplatTrackError):
    """Trajectories being compared have different lengths."""


class IndexMismatchError(SplatTrackError):
    """Trajectories being compared have different frame indices."""


class EmptyInputError(SplatTrackError):
    """Aggregation requires at least one item."""


class TrajectoryParseError(SplatTrackError):
    """Trajectory file is malformed; carries the 1-based offending line."""

    def __init__(self, line_number: int, reason: str):
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"line {line_number}: {reason}")
