"""Exception types shared across the package."""


class CbdidError(Exception):
    """Base class for all package-specific errors."""


class DataError(CbdidError):
    """A problem with input data (parsing, schema, emptiness)."""


class SchemaError(DataError):
    """A required column is missing or a column has the wrong role."""


class ParseError(DataError):
    """A cell failed to parse; the message names the offending row."""


class EmptyDataError(DataError):
    """The input contains no data rows."""


class SpecError(CbdidError, ValueError):
    """An invalid model specification or argument (bad index, k = 0, ...)."""


class DimensionError(CbdidError, ValueError):
    """Array shapes are inconsistent with each other or with the model."""


class NumericalError(CbdidError):
    """Base class for numerical failures during fitting."""


class RankError(NumericalError):
    """A matrix required to be invertible is singular or ill-conditioned."""


class SeparationError(NumericalError):
    """Logistic fitting failed: a treatment class is missing or separable."""


class ConvergenceError(NumericalError):
    """An iterative fit did not reach its tolerance within the budget."""


class DegenerateGroupError(NumericalError):
    """A treatment group is too small for a within-group variance."""


class PositivityError(NumericalError):
    """A propensity score touched 0 or 1 where a strict interior is needed."""
