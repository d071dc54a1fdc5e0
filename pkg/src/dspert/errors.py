"""Exception types shared across the package."""


class DspertError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(DspertError, ValueError):
    """Tensor shapes do not conform to an operation's contract."""


class BoundsError(DspertError, IndexError):
    """An index or slice is outside the valid range."""


class ContractError(DspertError, ValueError):
    """An operation was called in violation of its precondition."""


class ConfigError(DspertError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(DspertError, ValueError):
    """Input data is malformed or internally inconsistent."""


class UnsupportedSpanError(ContractError):
    """A span wider than the configured maximum span size was requested."""


class IntegrityError(DspertError, ValueError):
    """A serialized artifact is corrupt or has an unsupported version."""


class TrainingAborted(DspertError, RuntimeError):
    """Training stopped because the loss became non-finite."""
