"""Assimilation cycling: background chaining and per-window solves.

Window k spans steps [k*q, (k+1)*q] with q = window_steps.  Its background
is the previous analysis propagated by the tangent-linear model, the first
window uses the configured guess, and each analysis is the minimizer of that
window's cost function.
"""

from dataclasses import dataclass

import numpy as np

from .cost import WindowProblem, solve_closed_form, solve_iterative
from .errors import DomainError
from .grid import StateVector

CLOSED_FORM_MAX_N = 512


@dataclass(frozen=True)
class CycleConfig:
    """Window length (in model steps), cycle count and first-window guess."""

    window_steps: int
    n_cycles: int

    def __post_init__(self):
        if self.window_steps < 1:
            raise DomainError("window_steps must be >= 1")
        if self.n_cycles < 1:
            raise DomainError("n_cycles must be >= 1")


@dataclass(frozen=True)
class AnalysisSeries:
    """Per-cycle analyses plus the background each window solved against."""

    analyses: tuple
    backgrounds: tuple

    def __post_init__(self):
        if len(self.analyses) != len(self.backgrounds):
            raise DomainError("one background per analysis required")
        object.__setattr__(self, "analyses", tuple(self.analyses))
        object.__setattr__(self, "backgrounds", tuple(self.backgrounds))

    @property
    def n_cycles(self):
        return len(self.analyses)

    def stacked(self):
        """Analyses as a (K, n) array."""
        return np.array([a.x_A.values for a in self.analyses])


def make_background(k, prev, tlm, window_steps, guess=None):
    """Background for cycle k: the guess at k=0, else M^q applied to x_A[k-1]."""
    if k < 0:
        raise DomainError("cycle index must be >= 0")
    if k == 0:
        if guess is None:
            raise DomainError("cycle 0 needs a configured guess")
        return guess
    if prev is None:
        raise DomainError(f"cycle {k} has no previous analysis to propagate")
    x_prev = prev.x_A if hasattr(prev, "x_A") else prev
    values = tlm.power(window_steps) @ x_prev.values
    return StateVector(values, x_prev.time_index + window_steps)


def solve_window(problem):
    """Shared solver dispatch: closed form at desk scale, CG above."""
    if problem.n <= CLOSED_FORM_MAX_N:
        return solve_closed_form(problem)
    return solve_iterative(problem)


def run_reanalysis(guess, windows, background_cov, tlm, cycle_cfg):
    """Run the full cycle and collect the analysis series.

    windows is one tuple of WindowObservation batches per cycle; the result
    is deterministic given its inputs.
    """
    if len(windows) != cycle_cfg.n_cycles:
        raise DomainError(
            f"need observations for {cycle_cfg.n_cycles} windows, got {len(windows)}"
        )
    analyses = []
    backgrounds = []
    prev = None
    for k in range(cycle_cfg.n_cycles):
        x_b = make_background(k, prev, tlm, cycle_cfg.window_steps, guess=guess)
        problem = WindowProblem(
            x_b=x_b,
            B=background_cov,
            observations=tuple(windows[k]),
            tlm=tlm,
            window_steps=cycle_cfg.window_steps,
        )
        result = solve_window(problem)
        analyses.append(result)
        backgrounds.append(x_b)
        prev = result
    return AnalysisSeries(tuple(analyses), tuple(backgrounds))
