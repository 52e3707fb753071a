"""Exception types. Each maps to a distinct CLI exit code."""


class R2Error(Exception):
    exit_code = 5


class ConfigError(R2Error, ValueError):
    """Invalid configuration or hyperparameters."""

    exit_code = 2


class DataError(R2Error, ValueError):
    """Malformed, inconsistent or corrupt data."""

    exit_code = 3


class ContractError(DataError):
    """A caller broke an operation's preconditions (shapes, indices, masks)."""


class NumericError(R2Error, ArithmeticError):
    """Non-finite values or divergence during computation."""

    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ExperimentError(R2Error):
    """An experiment step could not produce any usable result."""
