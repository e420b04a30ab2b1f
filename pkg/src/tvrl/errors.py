"""Exception types raised across the package."""


class TVRLError(Exception):
    """Base class for all package errors."""


class ConfigError(TVRLError, ValueError):
    """Invalid or inconsistent configuration."""


class ContractError(TVRLError, ValueError):
    """A caller violated an operation's precondition."""


class UnusableRecordError(TVRLError, ValueError):
    pass


class EmptyBatchError(TVRLError, ValueError):
    pass


class DegenerateBatchError(TVRLError, ValueError):
    pass


class UndefinedMetricError(TVRLError, ValueError):
    pass


class CheckpointMismatchError(TVRLError):
    pass
