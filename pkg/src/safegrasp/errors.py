"""Exception hierarchy and the process exit codes tied to it."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class SafegraspError(Exception):
    """Base class for package errors; carries the CLI exit code."""

    exit_code = 1


class ConfigError(SafegraspError):
    exit_code = EXIT_CONFIG


class DataError(SafegraspError):
    exit_code = EXIT_DATA


class FrameError(DataError):
    """A tactile frame failed validation; the message names episode and timestep."""


class CalibrationError(DataError):
    """The dataset cannot support threshold calibration."""


class StoreError(DataError):
    """On-disk container violation: magic, version, checksum, or truncation."""


class NumericError(SafegraspError):
    exit_code = EXIT_NUMERIC

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class StaleCacheError(SafegraspError):
    """A backward pass was attempted against a cache from older parameters."""
