"""Exception types shared across the package."""


class FcnError(Exception):
    """Base class for package errors."""


class InvalidInputError(FcnError, ValueError):
    pass


class InvalidConfigError(FcnError, ValueError):
    pass


class UnsupportedDirectionError(FcnError, ValueError):
    pass


class ContractError(FcnError, ValueError):
    """An operation was called outside its preconditions."""


class NumericalError(FcnError, ArithmeticError):
    """Non-finite values appeared during optimization."""
