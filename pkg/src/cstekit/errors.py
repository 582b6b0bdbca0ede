"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class CstekitError(Exception):
    """Base class for all package errors."""


class ConfigError(CstekitError):
    """Invalid run configuration (bad flags, inconsistent options)."""


class DataError(CstekitError):
    """Problems with the input data itself."""


class DegenerateDataError(DataError):
    """Data cannot support the requested fit (single arm, too few distinct values)."""


class UnknownLevelError(DataError):
    """A categorical value not seen when the basis was built."""


class UndefinedDiagnosticError(DataError):
    """A diagnostic is undefined for the given inputs (e.g. zero-variance column)."""


class NumericError(CstekitError):
    """Numerical failure during estimation."""


class NumericOverflowError(NumericError):
    """A non-finite intermediate, typically an overflowing linear predictor."""

    def __init__(self, message: str, value: float | None = None):
        super().__init__(message)
        self.value = value


class SingularDesignError(NumericError):
    """A design matrix is rank deficient where full rank is required."""

    def __init__(self, message: str, columns: tuple[int, ...] = ()):
        super().__init__(message)
        self.columns = columns


class ConvergenceError(NumericError):
    """An iterative fit did not converge within its iteration budget."""
