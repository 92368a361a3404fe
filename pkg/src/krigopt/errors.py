"""Exception types shared across the package."""


class KrigoptError(Exception):
    """Base class for all krigopt errors."""


class DomainMismatch(KrigoptError):
    """A point has the wrong dimension or lies outside the search domain."""


class UnsupportedOperatorPair(KrigoptError):
    """Covariance between the given operator tags is not implemented."""


class SingularGram(KrigoptError):
    """The measurement Gram matrix stayed singular after jitter escalation.

    Usually means two measurements share (nearly) the same location and
    operator.
    """


class SingularEta(KrigoptError):
    """The hypothetical-measurement covariance is singular.

    Raised when a candidate measurement set duplicates information the
    posterior already holds exactly; callers should perturb or drop points.
    """


class NonPSD(KrigoptError):
    """A covariance matrix could not be repaired to positive semi-definite."""


class NoValueMeasurements(KrigoptError):
    """The field holds no measurement with the requested response operator."""


class EvaluatorFailure(KrigoptError):
    """The objective evaluator failed after all retries."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


class ConfigError(KrigoptError):
    """A run configuration file is malformed or contains unknown keys."""
