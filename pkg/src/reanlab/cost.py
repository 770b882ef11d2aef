"""The assimilation cost function, its gradient and the window solvers.

For one window starting at step t with q model steps, background x_b and
observations y_i at offsets k_i,

    J(x) = 1/2 (x_b - x)^T B^-1 (x_b - x)
         + 1/2 sum_i (y_i - G_i x)^T R_i^-1 (y_i - G_i x),

where G_i = H_i M^{k_i} carries the state to the observations (M^0 = I).
J is a strictly convex quadratic, so the analysis is the unique solution of

    (B^-1 + sum_i G_i^T R_i^-1 G_i) x = B^-1 x_b + sum_i G_i^T R_i^-1 y_i,

available either in closed form (Cholesky) or by conjugate gradients.  The
same normal equations expose the affine structure of the analysis,

    x_A = L x_b + sum_i K_i y_i,
    L   = S B^-1,   K_i = S G_i^T R_i^-1,   S = Hessian^-1,

with L fixed across windows whenever the geometry, model and covariances
are fixed.
"""

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy import linalg as sla

from .errors import ConvergenceError, DomainError, NumericError
from .grid import StateVector, exponential_covariance

_SYM_TOL = 1e-12
_EIG_CHECK_MAX_N = 64
_CLOSED_FORM_GRAD_TOL = 1e-10


@dataclass(frozen=True)
class Covariance:
    """Symmetric positive-definite error covariance (background or observation)."""

    role: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.role not in ("background", "observation"):
            raise DomainError(f"unknown covariance role {self.role!r}")
        m = np.ascontiguousarray(np.asarray(self.matrix, dtype=float))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DomainError("covariance must be a square matrix")
        if np.max(np.abs(m - m.T), initial=0.0) > _SYM_TOL * max(1.0, np.max(np.abs(m))):
            raise DomainError("covariance must be symmetric")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if m.shape[0] <= _EIG_CHECK_MAX_N:
            smallest = np.linalg.eigvalsh(m)[0]
            if not smallest > 0:
                raise NumericError(f"covariance not positive definite (min eig {smallest:.3g})")
        else:
            self.chol  # noqa: B018  - Cholesky success is the SPD check for large n

    @property
    def n(self):
        return self.matrix.shape[0]

    @cached_property
    def chol(self):
        try:
            return sla.cho_factor(self.matrix, lower=True)
        except sla.LinAlgError as exc:
            raise NumericError(f"Cholesky failed on {self.role} covariance: {exc}") from exc

    @cached_property
    def inv(self):
        out = sla.cho_solve(self.chol, np.eye(self.n))
        out = 0.5 * (out + out.T)
        out.setflags(write=False)
        return out

    def solve(self, rhs):
        return sla.cho_solve(self.chol, rhs)

    def half_solve(self, r):
        """z with C = L L^T and z = L^-1 r, so r^T C^-1 r = z . z >= 0."""
        return sla.solve_triangular(self.chol[0], r, lower=True)

    def check_block_diagonal(self, layout):
        """Verify zero coupling between different composition blocks."""
        p = layout.compositions.p
        if self.n != layout.n:
            raise DomainError("covariance size does not match the layout")
        m = self.matrix.reshape(layout.grid.n_cells, p, layout.grid.n_cells, p)
        off = m * (1.0 - np.eye(p))[None, :, None, :]
        if np.max(np.abs(off), initial=0.0) > _SYM_TOL:
            raise DomainError("background covariance couples different compositions")


def background_covariance(layout, sigma=1.0, corr_length=None):
    """Per-composition exponential spatial correlation, zero across compositions."""
    if corr_length is None:
        corr_length = 2.0 * layout.grid.spacing
    spatial = exponential_covariance(layout.grid, sigma, corr_length)
    full = np.kron(spatial, np.eye(layout.compositions.p))
    cov = Covariance("background", full)
    cov.check_block_diagonal(layout)
    return cov


def observation_covariance(m_obs, sigma):
    if not sigma > 0:
        raise DomainError("observation error sigma must be > 0")
    return Covariance("observation", float(sigma) ** 2 * np.eye(m_obs))


@dataclass(frozen=True)
class WindowObservation:
    """One observation batch inside a window: values, operator and error model."""

    offset: int
    y: np.ndarray
    H: "ObsOperator"
    R: Covariance

    def __post_init__(self):
        y = np.ascontiguousarray(np.asarray(self.y, dtype=float).ravel())
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "offset", int(self.offset))
        if self.offset < 0:
            raise DomainError("observation offset must be >= 0")
        if y.size != self.H.m_obs:
            raise DomainError(f"y length {y.size} != operator rows {self.H.m_obs}")
        if self.R.n != self.H.m_obs:
            raise DomainError("R size does not match the observation count")


@dataclass(frozen=True)
class WindowProblem:
    """Everything needed to minimize J over one assimilation window."""

    x_b: StateVector
    B: Covariance
    observations: tuple
    tlm: "TangentLinearModel"
    window_steps: int

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if self.window_steps < 1:
            raise DomainError("window must span at least one model step")
        if self.B.n != self.x_b.n or self.tlm.n != self.x_b.n:
            raise DomainError("background, covariance and model sizes must agree")
        for ob in self.observations:
            if ob.offset > self.window_steps:
                raise DomainError(f"observation offset {ob.offset} beyond window end")
            if ob.H.n != self.x_b.n:
                raise DomainError("observation operator width does not match the state")

    @property
    def n(self):
        return self.x_b.n

    @cached_property
    def operators(self):
        """Dense G_i = H_i M^{k_i} for every observation batch."""
        return tuple(ob.H.matrix @ self.tlm.power(ob.offset) for ob in self.observations)

    @cached_property
    def hessian(self):
        hess = self.B.inv.copy()
        for g, ob in zip(self.operators, self.observations):
            hess += g.T @ ob.R.solve(g)
        return 0.5 * (hess + hess.T)

    @cached_property
    def _hess_chol(self):
        try:
            return sla.cho_factor(self.hessian, lower=True)
        except sla.LinAlgError as exc:  # unreachable for SPD B, R
            raise NumericError(f"window Hessian factorization failed: {exc}") from exc

    @cached_property
    def rhs(self):
        out = self.B.inv @ self.x_b.values
        for g, ob in zip(self.operators, self.observations):
            out += g.T @ ob.R.solve(ob.y)
        return out

    def with_observation_values(self, ys):
        """Same geometry and weights, different observed values."""
        if len(ys) != len(self.observations):
            raise DomainError("need one value vector per observation batch")
        new = tuple(replace(ob, y=y) for ob, y in zip(self.observations, ys))
        return replace(self, observations=new)


@dataclass(frozen=True)
class AnalysisResult:
    """Minimizer of one window's cost function."""

    x_A: StateVector
    J_at_min: float
    gradient_norm_at_min: float
    solver: str
    iterations: int = 0


def eval_J(problem, x):
    """The window cost at state x (nonnegative; strictly convex in x)."""
    values = x.values if isinstance(x, StateVector) else np.asarray(x, dtype=float)
    if values.size != problem.n:
        raise DomainError("state length does not match the problem")
    zb = problem.B.half_solve(problem.x_b.values - values)
    total = 0.5 * float(zb @ zb)
    for g, ob in zip(problem.operators, problem.observations):
        zo = ob.R.half_solve(ob.y - g @ values)
        total += 0.5 * float(zo @ zo)
    return total


def grad_J(problem, x):
    """Exact gradient of eval_J at x."""
    values = x.values if isinstance(x, StateVector) else np.asarray(x, dtype=float)
    if values.size != problem.n:
        raise DomainError("state length does not match the problem")
    grad = problem.B.solve(values - problem.x_b.values)
    for g, ob in zip(problem.operators, problem.observations):
        grad -= g.T @ ob.R.solve(ob.y - g @ values)
    return grad


def solve_closed_form(problem):
    """Direct solution of the normal equations via Cholesky."""
    x = sla.cho_solve(problem._hess_chol, problem.rhs)
    gnorm = float(np.linalg.norm(grad_J(problem, x)))
    tol = _CLOSED_FORM_GRAD_TOL * (1.0 + float(np.linalg.norm(x)))
    if gnorm > tol:
        raise NumericError(f"closed-form gradient norm {gnorm:.3g} above {tol:.3g}")
    return AnalysisResult(
        x_A=StateVector(x, problem.x_b.time_index),
        J_at_min=eval_J(problem, x),
        gradient_norm_at_min=gnorm,
        solver="closed_form",
    )


def solve_iterative(problem, tol=None, max_iter=None, x0=None):
    """Conjugate-gradient minimization of J.

    The CG residual rhs - Hessian x equals -grad J exactly, so the stopping
    test is a gradient-norm test.  Raises ConvergenceError (carrying the last
    gradient norm) if max_iter is hit.
    """
    n = problem.n
    if max_iter is None:
        max_iter = n + 5
    rhs = problem.rhs
    if tol is None:
        tol = 1e-12 * max(1.0, float(np.linalg.norm(rhs)))
    if not tol > 0:
        raise DomainError("tol must be > 0")
    hess = problem.hessian
    x = np.array(problem.x_b.values if x0 is None else np.asarray(x0, dtype=float).ravel())
    r = rhs - hess @ x
    rs = float(r @ r)
    iterations = 0
    if np.sqrt(rs) > tol:
        p = r.copy()
        for iterations in range(1, int(max_iter) + 1):
            hp = hess @ p
            alpha = rs / float(p @ hp)
            x += alpha * p
            r -= alpha * hp
            rs_new = float(r @ r)
            if np.sqrt(rs_new) <= tol:
                rs = rs_new
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
        else:
            raise ConvergenceError(
                f"conjugate gradient did not reach tol={tol:.3g} in {max_iter} iterations",
                gradient_norm=float(np.sqrt(rs)),
            )
    return AnalysisResult(
        x_A=StateVector(x, problem.x_b.time_index),
        J_at_min=eval_J(problem, x),
        gradient_norm_at_min=float(np.sqrt(rs)),
        solver="conjugate_gradient",
        iterations=iterations,
    )


@dataclass(frozen=True)
class GainOperators:
    """Affine-map coefficients of the analysis in background and observations."""

    background_gain: np.ndarray        # L, n x n
    observation_gains: tuple           # K_i, n x m_i, aligned with the problem's batches
    offsets: tuple

    def reconstruct(self, x_b, ys):
        """L x_b + sum_i K_i y_i; must reproduce the closed-form analysis."""
        xb = x_b.values if isinstance(x_b, StateVector) else np.asarray(x_b, dtype=float)
        out = self.background_gain @ xb
        for k, y in zip(self.observation_gains, ys):
            out = out + k @ np.asarray(y, dtype=float)
        return out

    def constant_term(self, x_b):
        """The observation-free offset of the affine analysis map."""
        xb = x_b.values if isinstance(x_b, StateVector) else np.asarray(x_b, dtype=float)
        return self.background_gain @ xb


def gain_operators(problem):
    """L and the K_i of the affine analysis map for this window."""
    s = sla.cho_solve(problem._hess_chol, np.eye(problem.n))
    s = 0.5 * (s + s.T)
    background_gain = s @ problem.B.inv
    obs_gains = tuple(
        s @ (g.T @ ob.R.inv) for g, ob in zip(problem.operators, problem.observations)
    )
    return GainOperators(
        background_gain=background_gain,
        observation_gains=obs_gains,
        offsets=tuple(ob.offset for ob in problem.observations),
    )
