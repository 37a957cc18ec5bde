"""Exception hierarchy shared by the library and the command line."""


class FedOUIError(Exception):
    """Base class for all package errors."""


class ConfigError(FedOUIError, ValueError):
    """Invalid model or experiment configuration.

    ``key`` names the offending config field or layer when known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class InputError(FedOUIError, ValueError):
    """An argument violates an operation's precondition."""


class NumericError(FedOUIError, ArithmeticError):
    """A numerical routine failed (non-convergence, non-finite values)."""


class DataError(FedOUIError, OSError):
    """Dataset files are missing, truncated or malformed."""


class InternalError(FedOUIError, RuntimeError):
    """Inconsistent internal state, e.g. a cache from a different forward pass."""
