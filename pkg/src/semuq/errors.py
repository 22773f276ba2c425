"""Exception hierarchy shared across the package."""


class UQError(Exception):
    """Base class for all package errors."""


class InvalidConfig(UQError, ValueError):
    pass


class BackendUnavailable(UQError):
    """A completion backend could not produce a response."""


class TransientBackendError(BackendUnavailable):
    """Transport failure or 5xx response; safe to retry."""


class LogprobsMissing(UQError):
    """Backend payload lacked usable token log-probabilities."""


class EmptySentence(UQError, ValueError):
    pass


class EmptyReport(UQError, ValueError):
    pass


class EmptySampleSet(UQError, ValueError):
    pass


class RemoteJudgeUnavailable(UQError):
    pass


class MissingLikelihoods(UQError):
    """An estimator needs sequence log-probabilities that some sample lacks."""


class NoParseableAnswers(UQError):
    pass


class InvalidThresholds(UQError, ValueError):
    pass


class ScorerUnavailable(UQError):
    pass


class TooFewCandidates(UQError, ValueError):
    pass


class EmptyBatch(UQError, ValueError):
    pass


class DegenerateLabels(UQError, ValueError):
    """AUROC is undefined when only one class is present."""
