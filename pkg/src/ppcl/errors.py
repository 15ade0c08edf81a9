"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad configuration: incompatible shapes, invalid rates, unknown keys."""


class DataError(ValueError):
    """Bad data: out-of-vocabulary ids, non-positive day counts, short datasets."""


class TrainError(RuntimeError):
    """Training-time failure: NaN/Inf gradients, divergence."""
