"""Exception hierarchy shared across the pipeline.

Each exception maps to a CLI exit code; see cli.EXIT_CODES.
"""


class TryOnError(Exception):
    """Base class for all pipeline errors."""


class ArgumentError(TryOnError, ValueError):
    """Invalid argument: bad shapes, out-of-range values, malformed masks."""


class NumericalDegeneracyError(TryOnError):
    """A regularized MLS solve was still singular (collinear control points)."""


class EmptyRegionError(TryOnError):
    """A mask was empty after downsampling to feature resolution."""

    def __init__(self, side: str):
        self.side = side
        super().__init__(f"masked region on the {side} side is empty at feature resolution")


class InsufficientCorrespondenceError(TryOnError):
    """Fewer than 3 matches survived filtering; registration cannot proceed."""

    def __init__(self, n_matches: int):
        self.n_matches = n_matches
        super().__init__(
            f"only {n_matches} correspondence(s) found; at least 3 are needed. "
            "Try enlarging the garment/person masks or lowering the outlier threshold."
        )


class CapabilityError(TryOnError):
    """The backend lacks a required capability (capture layer, attention hook)."""


class StepUnderflowError(TryOnError):
    """A denoising step was requested at t=0."""
