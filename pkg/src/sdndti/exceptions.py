"""Exception hierarchy shared by all sdndti modules."""


class SDnDTIError(Exception):
    """Base class for every domain error raised by this package."""


class FormatError(SDnDTIError):
    """A file does not follow the expected on-disk layout."""


class UnsupportedError(SDnDTIError):
    """A well-formed file uses a feature this package does not handle."""


class ShapeError(SDnDTIError, ValueError):
    """Array or model shapes are inconsistent."""


class InvalidSchemeError(SDnDTIError, ValueError):
    """A gradient scheme or direction set violates its invariants."""


class SingularSchemeError(InvalidSchemeError):
    """A direction set is degenerate (rank deficient or coincident)."""


class InsufficientCandidatesError(SDnDTIError):
    """Too few disjoint well-conditioned direction subsets were found."""

    def __init__(self, message, n_candidates):
        super().__init__(message)
        self.n_candidates = n_candidates


class InvalidSignalError(SDnDTIError, ValueError):
    """Signal values that the tensor model cannot use (e.g. S0 <= 0)."""


class InvalidPlanError(SDnDTIError, ValueError):
    """A subset plan does not match the acquisition it is applied to."""


class DegenerateInputError(SDnDTIError, ValueError):
    """Input has no usable variance or an empty mask."""


class InvalidInputError(SDnDTIError, ValueError):
    """Generic invalid argument (e.g. non-unit vectors)."""


class WindowError(SDnDTIError, ValueError):
    """Volume is smaller than the SSIM window."""


class DivergenceError(SDnDTIError):
    """Training produced a non-finite loss."""


class StageError(SDnDTIError):
    """Wraps a failure inside a pipeline stage, naming the stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
