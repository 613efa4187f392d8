"""Exception types shared across the toolkit."""


class SmallMotionError(Exception):
    """Base class for every error raised by this package."""


class NonConvergent(SmallMotionError):
    """Iterative inverse of the distortion model did not reach tolerance."""


class NonPositiveDepth(SmallMotionError):
    """Inverse depth must be strictly positive."""


class BehindCamera(SmallMotionError):
    """Point projects behind the camera plane."""


class ImageTooSmall(SmallMotionError):
    """Image is too small for the requested window."""


class SizeMismatch(SmallMotionError):
    """Images in a sequence must share one size."""


class TooFewFrames(SmallMotionError):
    """At least two frames are required."""


class TooFewTracks(SmallMotionError):
    """Fewer surviving tracks than the well-posedness minimum of 16."""


class DecodeError(SmallMotionError):
    """Frame file could not be decoded."""


class Degenerate(SmallMotionError):
    """Rotation estimation normal equations are ill-conditioned."""


class DegenerateMotion(SmallMotionError):
    """Translation baseline indistinguishable from zero (pure rotation)."""


class SignAmbiguous(SmallMotionError):
    """Sign gauge of the factorization cannot be resolved."""


class NumericalFailure(SmallMotionError):
    """Normal equations unsolvable even under maximum damping."""


class BadRange(SmallMotionError):
    """Invalid sampling range."""


class StageError(SmallMotionError):
    """Pipeline stage failure, carrying the stage name and the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
