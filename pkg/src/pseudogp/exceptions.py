"""Exception hierarchy shared across the package."""


class PseudoGPError(Exception):
    """Base class for every error raised by this package."""


class NotPositiveDefinite(PseudoGPError):
    pass


class DimensionMismatch(PseudoGPError, ValueError):
    pass


class NoConvergence(PseudoGPError):
    pass


class ParseError(PseudoGPError, ValueError):
    pass


class SchemaError(PseudoGPError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ValidationError(PseudoGPError, ValueError):
    pass


class DegenerateArm(PseudoGPError, ValueError):
    pass


class OverlapViolation(PseudoGPError, ValueError):
    pass


class InvalidTask(PseudoGPError, ValueError):
    pass


class AllRestartsFailed(PseudoGPError):
    pass


class NegativeVariance(PseudoGPError, ArithmeticError):
    pass


class QueryOutsideSupport(PseudoGPError, ValueError):
    pass


class RegionTooSmall(PseudoGPError, ArithmeticError):
    pass


class InsufficientData(PseudoGPError, ValueError):
    pass


class ConfigError(PseudoGPError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ExperimentFailed(PseudoGPError):
    """Too many replications of an experiment failed."""
