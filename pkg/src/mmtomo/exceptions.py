"""Error types shared across the toolkit.

Two families matter to callers: configuration problems (bad dimensions,
malformed specs) and numerical failures (truncation leaks, degenerate
fits).  The CLI maps the former to exit code 2 and the latter to 3.
"""


class ConfigError(ValueError):
    """A configuration, schema, or dimension-bookkeeping problem."""


class DimensionMismatchError(ConfigError):
    """Operands live on different product spaces."""


class NumericalError(RuntimeError):
    """Base class for runtime numerical failures."""


class TruncationLeakError(NumericalError):
    """Population escaped above the guard band of the truncated space."""


class RankDeficientError(NumericalError):
    """A design or coefficient matrix is too ill-conditioned to invert.

    Carries the offending condition number so callers can report it.
    """

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class FitConvergenceError(NumericalError):
    """A scalar or nonlinear fit failed to converge."""


class CalibrationError(NumericalError):
    """A calibration scan produced no usable signal."""


class ConditioningWarning(UserWarning):
    """The problem is solvable but poorly conditioned (overfitting risk)."""
