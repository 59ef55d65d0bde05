"""Exception hierarchy shared by all nvkit modules."""


class NvkitError(Exception):
    """Base class for all nvkit errors."""


class DimensionError(NvkitError):
    """Shapes passed to an operation do not fit together."""


class ContractError(NvkitError):
    """A call violated a documented precondition."""


class ConfigError(NvkitError):
    """A configuration value is missing, malformed, or inconsistent."""


class CheckpointError(NvkitError):
    """A checkpoint archive is corrupt or does not match the model."""


class NumericalError(NvkitError):
    """Non-finite values were detected where finite values are required."""


class UnsupportedArchitectureError(NvkitError):
    """The requested operation does not exist for this backbone type."""
