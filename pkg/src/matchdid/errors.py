"""Exception hierarchy for matchdid.

Everything raised on purpose by the library derives from ``MatchDidError`` so the
CLI can turn it into a one-line diagnostic and exit code 1. ``DataError`` marks
problems with the input data or an infeasible design; it also subclasses
``ValueError`` so callers that only know the stdlib can still catch it.
"""

from __future__ import annotations


class MatchDidError(Exception):
    """Base class for all matchdid errors."""


class DataError(MatchDidError, ValueError):
    """The data (or the design built from it) cannot support the requested operation."""


class UnbalancedPanelError(DataError):
    """Some unit is missing an outcome for some period."""


class InvalidCohortLabelError(DataError):
    """A cohort label is 1, or a finite label lies beyond the last period."""


class DegenerateDesignError(DataError):
    """The design has no usable treatment variation (zero 2WFE denominator, one cohort)."""


class EmptyWindowError(DataError):
    """The period selector leaves the pre- or post-treatment window empty for a cohort."""


class InsufficientComparisonsError(DataError):
    """Not enough comparison units to give every target unit M distinct neighbors."""


class EmptyComparisonCohortError(DataError):
    """The comparison cohort has no units."""


class EmptyCellForTreatedError(DataError):
    """A covariate cell holds a target unit but no comparison unit."""

    def __init__(self, cell: tuple[float, ...]) -> None:
        super().__init__(f"covariate cell {cell} has target units but no comparison units")
        self.cell = cell


class NonDiscreteCovariateError(DataError):
    """Exact-cell matching was requested on a continuous covariate."""


class MismatchedPanelsError(DataError):
    """Match results built from different panels were combined."""


class SingularRegressionError(DataError):
    """The bias-correction regression cannot identify predictions at the target units."""


class TooFewForSigmaError(DataError):
    """A cohort has too few members to estimate conditional variances from J neighbors."""


class TimeVaryingCovariateError(DataError):
    """A covariate changes value across one unit's rows."""

    def __init__(self, unit: object, column: str) -> None:
        super().__init__(f"covariate '{column}' varies across rows of unit {unit!r}")
        self.unit = unit
        self.column = column


class MissingColumnError(DataError):
    """A required input column is absent."""

    def __init__(self, column: str, source: str = "input") -> None:
        super().__init__(f"{source}: missing required column '{column}'")
        self.column = column
        self.source = source


class ParseError(DataError):
    """A value in an input file cannot be parsed or violates a field constraint."""

    def __init__(self, message: str, *, row: int | None = None, column: str | None = None) -> None:
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")
        self.row = row
        self.column = column


class AlphaUnavailableError(MatchDidError, LookupError):
    """No value of alpha(M, q) is known for the requested pair."""

    def __init__(self, M: int, q: int) -> None:
        super().__init__(
            f"alpha(M={M}, q={q}) has no closed form for q > 1; supply it in an alpha table"
        )
        self.M = M
        self.q = q
