"""Exception hierarchy shared by cf_utils and run_utils.

Everything raised on purpose derives from CounterfactualError so callers (the
bench harness, the CLI) can catch one type and still map each failure to its
own message and exit code. Where a failure is also a classic builtin category
(a bad value, a missing file, a failed factorization) the class inherits that
builtin too, so `except ValueError` style callers keep working.
"""

from numpy.linalg import LinAlgError


class CounterfactualError(Exception):
    """Base class for every deliberate failure in this package."""


class FactorizationError(CounterfactualError, LinAlgError):
    def __init__(self, message: str, jitter: float = 0.0):
        super().__init__(message)
        self.jitter = jitter


class NotPSDError(CounterfactualError, ValueError):
    def __init__(self, message: str, min_eigenvalue: float = float("nan")):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class JointPriorError(NotPSDError):
    """The masked cross-covariance produced a joint prior that is not PSD."""


class ConditioningError(CounterfactualError, ValueError):
    pass


class ScmError(CounterfactualError, ValueError):
    pass


class TrainingDivergedError(CounterfactualError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class OptimizationError(CounterfactualError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class LaplaceError(CounterfactualError):
    pass


class RankDeficientError(CounterfactualError, ValueError):
    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SchemaError(CounterfactualError, ValueError):
    pass


class NoCounterfactualError(CounterfactualError):
    def __init__(self, message: str, radius: float):
        super().__init__(message)
        self.radius = radius


class UnreachableError(CounterfactualError):
    pass


class ConfigError(CounterfactualError, ValueError):
    pass


class ArtifactError(CounterfactualError, FileNotFoundError):
    pass


class InsufficientDataError(CounterfactualError, ValueError):
    """Too few training rows for the requested fit or neighbourhood."""

    def __init__(self, message: str, needed: int = 0, got: int = 0):
        super().__init__(message)
        self.needed = needed
        self.got = got
