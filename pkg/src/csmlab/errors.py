"""Exception hierarchy shared across the package."""


class CSMError(Exception):
    """Base class for all errors raised by csmlab."""


class ConfigurationError(CSMError, ValueError):
    """A configuration value is invalid or inconsistent.

    ``field`` carries a dotted path to the offending setting when known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class UsageError(CSMError, ValueError):
    """An API was called with arguments that violate its contract."""


class NumericError(CSMError, FloatingPointError):
    """A computation produced non-finite values."""


class UndefinedMetricError(CSMError, ValueError):
    """A metric cannot be computed for the given inputs."""


class VolumeIOError(CSMError, OSError):
    """Base class for volume file format errors."""


class MalformedHeaderError(VolumeIOError):
    pass


class ExtentMismatchError(VolumeIOError):
    pass


class TruncatedPayloadError(VolumeIOError):
    pass


class CheckpointError(CSMError, OSError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CorruptBlobError(CheckpointError):
    pass


class StrictLoadError(CheckpointError):
    """Checkpoint parameter names do not match the expected set."""


class AblationArmError(CSMError):
    """One arm of the ablation grid failed; ``arm`` names it."""

    def __init__(self, arm: str, cause: BaseException):
        self.arm = arm
        self.cause = cause
        super().__init__(f"ablation arm {arm!r} failed: {type(cause).__name__}: {cause}")
