from typing import Optional


class CoxNiiError(Exception):
    """Base class of all errors raised by coxnii."""


class DatasetParseError(CoxNiiError, ValueError):
    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f'row {row}: {message}'
        super().__init__(message)


class ConfigurationError(CoxNiiError, ValueError):
    pass


class InvalidPriorError(ConfigurationError):
    pass


class DomainError(CoxNiiError, ValueError):
    pass


class NumericalError(CoxNiiError, ArithmeticError):
    pass


class MonotoneLikelihoodError(NumericalError):
    pass


class DegenerateRiskSetError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass
