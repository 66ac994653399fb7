"""Exception hierarchy shared across the package.

Every exception carries a short machine-readable ``code`` (stable CLI
contract) and subclasses one of two families: :class:`PanelDataError`
(bad input data, CLI exit 3) or :class:`EstimationError` (the data loaded
but an estimate cannot be produced, CLI exit 4).
"""

from __future__ import annotations


class TwoStageDidError(Exception):
    """Base class for all package errors."""

    code = "E_ERROR"


class PanelDataError(TwoStageDidError):
    """Input data is malformed or violates a panel invariant."""

    code = "E_DATA"


class EstimationError(TwoStageDidError):
    """A well-formed dataset that cannot support the requested estimate."""

    code = "E_ESTIMATION"


# --- data errors -----------------------------------------------------------


class MissingColumnError(PanelDataError):
    code = "E_MISSING_COLUMN"


class DuplicateUnitTimeError(PanelDataError):
    code = "E_DUPLICATE"


class NonNumericOutcomeError(PanelDataError):
    code = "E_NONNUMERIC"


class EmptyFileError(PanelDataError):
    code = "E_EMPTY"


class NonIntegerTimeError(PanelDataError):
    code = "E_NONINTEGER_TIME"


class InvalidGroupValueError(PanelDataError):
    code = "E_BAD_GROUP"


class InvalidWeightError(PanelDataError):
    code = "E_BAD_WEIGHT"


class InvalidSharesError(TwoStageDidError):
    """Simulator group shares do not form a distribution (usage error)."""

    code = "E_INVALID_SHARES"


# --- estimation errors -----------------------------------------------------


class NoUntreatedObservationsError(EstimationError):
    code = "E_NO_UNTREATED"


class NoTreatedObservationsError(EstimationError):
    code = "E_NO_TREATED"


class UnseenLevelError(EstimationError):
    code = "E_UNSEEN_LEVEL"


class DidNotConvergeError(EstimationError):
    code = "E_CONVERGENCE"

    def __init__(self, message: str, iterations: int, max_abs_update: float):
        super().__init__(message)
        self.iterations = iterations
        self.max_abs_update = max_abs_update


class SingularCovariatesError(EstimationError):
    code = "E_SINGULAR_COVARIATES"


class NoRowsSelectedError(EstimationError):
    code = "E_NO_ROWS"


class AllColumnsCollinearError(EstimationError):
    code = "E_ALL_COLLINEAR"


class DegenerateDesignError(EstimationError):
    code = "E_DEGENERATE"


class SingularSecondStageGramError(EstimationError):
    code = "E_SINGULAR_SECOND_STAGE"


class SingularFirstStageGramError(EstimationError):
    """Should not occur once unidentified levels are screened out."""

    code = "E_SINGULAR_FIRST_STAGE"


class TooManyFailedReplicatesError(EstimationError):
    code = "E_BOOTSTRAP_FAILURES"
