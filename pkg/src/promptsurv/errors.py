"""Exception types shared across the package."""


class PromptSurvError(Exception):
    """Base class for domain errors raised by this package."""


class UndefinedMetricError(PromptSurvError):
    """A metric has no defined value for the given inputs (e.g. no comparable pairs)."""


class EmptySlideError(PromptSurvError):
    """A slide has no usable tiles left after filtering."""


class StaleCacheError(PromptSurvError):
    """A precomputed feature cache does not match the current encoder/config."""
