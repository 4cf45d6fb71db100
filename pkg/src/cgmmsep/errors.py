"""Exception types shared across the package."""


class CgmmsepError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CgmmsepError):
    """Invalid configuration value, unknown key, or inconsistent settings."""


class ConfigMismatchError(ConfigError):
    """Metadata stored with the data disagrees with the requested config."""


class DimensionError(CgmmsepError):
    """Array shapes do not match the documented contract."""


class InputTooShortError(DimensionError):
    """Signal shorter than one analysis window."""


class NumericError(CgmmsepError):
    """Non-finite values or a numerically degenerate state."""


class AudioIOError(CgmmsepError):
    """Audio file reading/writing failed or the file is malformed."""


class CheckpointError(CgmmsepError):
    """Checkpoint file is corrupt or its topology does not match."""
