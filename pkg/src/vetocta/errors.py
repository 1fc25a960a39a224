"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/argument problems exit
with 2, data and file-format problems with 3, numeric failures with 4.
"""


class ConfigError(ValueError):
    """Invalid configuration or argument."""


class RegistrationError(ValueError):
    """Frame registration could not run (e.g. an all-zero frame)."""

    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class FormatError(Exception):
    """Base class for on-disk format problems."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class NumericError(RuntimeError):
    """Non-finite values during training."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
