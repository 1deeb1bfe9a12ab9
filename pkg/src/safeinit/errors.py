"""Exception hierarchy shared by all modules."""


class SafeInitError(Exception):
    """Base class for every error raised by this package."""


class NumericalFailure(SafeInitError):
    pass


class NotPositiveDefinite(SafeInitError):
    pass


class SingularMatrix(SafeInitError):
    pass


class ModelError(SafeInitError):
    pass


class EstimationError(SafeInitError):
    pass


class ConfidenceTooHigh(EstimationError):
    """The confidence level exceeds the peak of the density estimate."""


class SynthesisFailed(SafeInitError):
    """No decay rate on the grid admitted a certified controller.

    ``merits`` maps each tried decay rate to the best merit value reached.
    """

    def __init__(self, message, merits=None):
        super().__init__(message)
        self.merits = dict(merits or {})


class NotStabilizable(SafeInitError):
    pass


class BasisError(SafeInitError):
    pass


class ImprovementError(SafeInitError):
    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class DomainError(SafeInitError):
    pass


class RankError(SafeInitError):
    def __init__(self, message, deficient_terms=()):
        super().__init__(message)
        self.deficient_terms = list(deficient_terms)


class SafeAbort(SafeInitError):
    """A learning rollout diverged; carries the iteration index."""

    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(SafeInitError):
    pass


class ParseError(SafeInitError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column
