"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class HPBandsError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(HPBandsError, ValueError):
    exit_code = 2


class ShellError(ConfigError):
    """Plane-wave cutoff too small to resolve the requested bands."""

    def __init__(self, message, required_cutoff=None):
        super().__init__(message)
        self.required_cutoff = required_cutoff


class AdmissibilityError(HPBandsError, ValueError):
    exit_code = 3


class NumericalError(HPBandsError, ArithmeticError):
    exit_code = 4


class ConditioningError(NumericalError):
    pass


class InsufficientDataError(NumericalError):
    pass


class DomainError(HPBandsError, ValueError):
    exit_code = 5


class MeshValidationError(HPBandsError, ValueError):
    exit_code = 2
