"""Exception hierarchy for the qqq toolkit."""


class QQQError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(QQQError, ValueError):
    """Operand dimensions are inconsistent."""


class DataError(QQQError, ValueError):
    """Input values are invalid (non-finite, out of domain)."""


class ConfigError(QQQError, ValueError):
    """Configuration is inconsistent (bad scheme, group size, engine mismatch)."""


class CorruptionError(QQQError, ValueError):
    """Stored data fails a consistency check (bad nibble, metadata mismatch)."""


class NumericalError(QQQError, ArithmeticError):
    """A numerical routine failed (e.g. Cholesky factorization of a non-PD matrix)."""


class CalibrationError(QQQError, ValueError):
    """Calibration data is degenerate or missing."""


class CheckpointFormatError(QQQError, ValueError):
    """A checkpoint file failed to parse (bad magic, truncation, bad layout)."""
