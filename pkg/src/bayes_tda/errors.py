"""Exception hierarchy shared across the package."""


class BayesTDAError(Exception):
    """Base class for all package errors."""


class DomainError(BayesTDAError, ValueError):
    pass


class NotPositiveDefinite(BayesTDAError, ArithmeticError):
    """A Cholesky pivot fell below threshold; raise the damping and retry."""


class NonFiniteEncountered(BayesTDAError, ArithmeticError):
    pass


class NonFiniteLoss(NonFiniteEncountered):
    pass


class ParamCountTooLarge(BayesTDAError, ValueError):
    pass


class DivergedTraining(BayesTDAError, RuntimeError):
    def __init__(self, message, member_id=None):
        if member_id is not None:
            message = f"member {member_id}: {message}"
        super().__init__(message)
        self.member_id = member_id


class MismatchedSampleSets(BayesTDAError, ValueError):
    pass


class DegenerateSampleCount(BayesTDAError, ValueError):
    pass


class ZeroVarianceInput(BayesTDAError, ValueError):
    pass


class MalformedIdx(BayesTDAError, ValueError):
    pass


class ConfigError(BayesTDAError, ValueError):
    pass
