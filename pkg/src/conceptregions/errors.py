"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid model, translator, or run configuration."""


class InputShapeError(ValueError):
    """Input array does not match the shape a model expects."""


class ReshapeError(ValueError):
    """Token sequence cannot be laid out on a square grid."""


class GradientUnavailableError(RuntimeError):
    """Score does not depend on the requested activations."""


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given sample (empty mask, all-zero map, ...)."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""
