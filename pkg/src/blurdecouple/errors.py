"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value, unknown phase, prompt or config key."""


class PhaseOrderError(RuntimeError):
    """A training phase was started before its prerequisite finished."""


class IntegrityError(IOError):
    """A checkpoint file is truncated, corrupt or of the wrong version."""


class NumericError(ArithmeticError):
    """A model produced non-finite values."""
