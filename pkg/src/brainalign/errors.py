"""Exception types shared across the package."""


class BrainAlignError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(BrainAlignError):
    """A filter/feature/config specification is not applicable (e.g. cutoff >= Nyquist)."""


class InsufficientDataError(BrainAlignError):
    """Input too short for the requested operation."""


class AlignmentError(BrainAlignError):
    """Series that must be aligned (length, t0, channel layout) are not."""


class CoverageError(BrainAlignError):
    """Requested time intervals are not covered by the available files.

    Carries a gap report: a list of (start_s, end_s) uncovered intervals.
    """

    def __init__(self, message: str, gaps: list[tuple[float, float]]):
        super().__init__(message)
        self.gaps = list(gaps)


class EmptyDatasetError(BrainAlignError):
    """No eligible units remain after filtering/exclusion."""


class StepRejectedError(BrainAlignError):
    """An optimizer step was rejected (non-finite gradients)."""

    def __init__(self, message: str, offending: list[str]):
        super().__init__(message)
        self.offending = list(offending)


class ConfigError(BrainAlignError):
    """Invalid experiment configuration."""
