"""Exception hierarchy shared by all modules.

Each class carries the process exit code the command line maps it to.
"""


class SdentropyError(Exception):
    exit_code = 3


class ConfigurationError(SdentropyError, ValueError):
    exit_code = 2


class DomainError(SdentropyError, ValueError):
    exit_code = 2


class CapabilityError(SdentropyError):
    """A model lacks a coefficient derivative an operation needs."""

    exit_code = 2


class DegenerateDataError(SdentropyError, ValueError):
    exit_code = 3


class SingularityError(SdentropyError, ArithmeticError):
    exit_code = 3


class NumericalOverflowError(SdentropyError, ArithmeticError):
    def __init__(self, message, t=None, x=None, step=None):
        super().__init__(message)
        self.t = t
        self.x = x
        self.step = step


class ResourceError(SdentropyError):
    exit_code = 4
