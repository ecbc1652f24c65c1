"""Exception hierarchy shared across the package.

The CLI maps ``ConfigError`` to exit status 2 and every other
``ExitguardError`` (and I/O failures) to exit status 1.
"""


class ExitguardError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ExitguardError):
    """An operation received data violating its preconditions."""


class ConfigError(ExitguardError):
    """A configuration value (flag, file, fraction, budget) is invalid."""


class CalibrationError(ExitguardError):
    """Threshold calibration cannot proceed (e.g. empty calibration set)."""


class ParseError(ExitguardError):
    """A file could not be parsed; message names the offending line."""


class FormatError(ExitguardError):
    """A file parsed but violates its declared header (shape/version)."""


class TrainingDivergedError(ExitguardError):
    """Training produced a non-finite loss; message carries epoch/batch."""
