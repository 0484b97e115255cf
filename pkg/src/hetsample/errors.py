"""Exception hierarchy. The CLI maps each family onto an exit code."""


class HetSampleError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class InputError(HetSampleError):
    """Malformed or missing input data (exit code 1)."""


class ConfigurationError(HetSampleError):
    """Infeasible or degenerate configuration (exit code 2)."""

    exit_code = 2


class DegenerateFeatureSpace(ConfigurationError):
    pass


class InsufficientDiversity(ConfigurationError):
    pass


class ElementTooLarge(ConfigurationError):
    pass


class MetricError(HetSampleError):
    """A per-image metric is undefined for the given image/mask pair."""
