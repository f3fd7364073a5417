"""Exception hierarchy. The CLI maps each family onto an exit status."""


class ScdError(Exception):
    """Base class for all package errors."""


class ConfigError(ScdError, ValueError):
    """Invalid or inconsistent configuration (CLI exit status 1)."""


class DataError(ScdError):
    """Missing, malformed or semantically invalid data (CLI exit status 2)."""


class NumericError(ScdError, ArithmeticError):
    """Non-finite values or undefined metrics (CLI exit status 3)."""


class CheckpointError(ScdError):
    """Checkpoint cannot be read or does not match the model configuration."""
