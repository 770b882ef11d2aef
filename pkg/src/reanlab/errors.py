"""Exception taxonomy shared by all reanlab modules."""


class ReanlabError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ReanlabError, ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


class DomainError(ReanlabError, ValueError):
    """Arguments outside an operation's contract (bad index, misaligned
    times, location outside the grid hull, missing prior state, ...)."""


class NumericError(ReanlabError, RuntimeError):
    """Numerical failure: covariance not positive definite, linear solve
    breakdown, and similar (CLI exit code 3)."""


class DivergenceError(NumericError):
    """A state became non-finite during time integration."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceError(NumericError):
    """Iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, gradient_norm=None):
        super().__init__(message)
        self.gradient_norm = gradient_norm
