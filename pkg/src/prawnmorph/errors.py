"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents do not satisfy an operation's shape contract."""


class ConfigError(ValueError):
    """A configuration value is invalid (divisibility, ranges, flags)."""


class ContractError(ValueError):
    """An input violates a documented precondition beyond pure shape."""


class MetricUndefinedError(ValueError):
    """A metric has no defined value for this input (e.g. zero variance)."""


class DatasetError(ValueError):
    """A dataset on disk is missing, truncated or malformed."""
