"""Exception hierarchy.

Validation problems (bad input files, bad configs) derive from ``DataError``;
numerical failures of an estimator derive from ``EstimationError``.  The CLI
maps the first to exit code 1 and the second to exit code 2.
"""


class DataError(ValueError):
    """Input data or configuration violates a documented contract."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"{message} at row {row}"
        super().__init__(message)
        self.row = row


class EstimationError(RuntimeError):
    """An estimator could not produce a usable answer."""


class RankDeficientError(EstimationError):
    """Design or instrument matrix does not have full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SeparationError(EstimationError):
    """Logistic regression data are (quasi-)completely separated."""


class InestimableError(EstimationError):
    """A parameter is not identified by the data at hand."""


class InestimableWeightError(EstimationError):
    """A censoring survivor estimate hit zero where a weight is needed."""
