"""Exception hierarchy shared by the services."""


class ReservingError(Exception):
    """Base class for every error raised by the reserving engine."""


class PanelError(ReservingError):
    """Triangle ingestion, shape or exposure problem."""


class DomainError(ReservingError):
    """Argument outside the support of a density or sampler."""


class SeriesConvergenceError(ReservingError):
    """Tweedie series reached its term cap before the tail became negligible."""


class ConvergenceError(ReservingError):
    """Iterative fit exhausted its iteration budget."""


class SingularMatrixError(ReservingError):
    """Matrix could not be factorised even after jitter escalation."""


class DegeneracyError(ReservingError):
    """Particle weights collapsed or a predictor became non-finite."""


class ArtifactError(ReservingError):
    """Stored fit lacks the state an operation needs."""
