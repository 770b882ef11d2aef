"""Nonlinear evolution m, its tangent-linear matrix, and step products.

The linear kind advances a state by one step of an upwind advection plus
centered diffusion stencil with periodic boundaries; the quadratic kind adds
an elementwise quadratic term, m(x) = A x + gain * (x * x), which vanishes
from the Jacobian at zero, so both kinds share the tangent-linear matrix A.
"""

import threading
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, DomainError
from .grid import StateVector, _readonly

LINEAR = "linear_advection_diffusion"
QUADRATIC = "quadratic_perturbed"

_TIME_ALIGN_RTOL = 1e-9


def _spatial_stencil(grid, advection, diffusion, dt):
    """One-step advection-diffusion matrix on the grid cells (periodic)."""
    shape = grid.axis_shape
    n = grid.n_cells
    ds = grid.spacing
    a = np.zeros((n, n))
    np.fill_diagonal(a, 1.0)

    def add(row_idx, col_idx, w):
        a[grid.cell_index(row_idx), grid.cell_index(col_idx)] += w

    for cell in range(n):
        idx = grid.axis_indices(cell)
        # upwind advection along axis 0
        c = advection * dt / ds
        if c != 0.0:
            up = list(idx)
            if advection > 0:
                up[0] = (idx[0] - 1) % shape[0]
                add(idx, idx, -c)
                add(idx, tuple(up), c)
            else:
                up[0] = (idx[0] + 1) % shape[0]
                add(idx, idx, c)
                add(idx, tuple(up), -c)
        # centered diffusion along every axis
        r = diffusion * dt / ds**2
        if r != 0.0:
            for k in range(grid.dim):
                lo, hi = list(idx), list(idx)
                lo[k] = (idx[k] - 1) % shape[k]
                hi[k] = (idx[k] + 1) % shape[k]
                add(idx, idx, -2.0 * r)
                add(idx, tuple(lo), r)
                add(idx, tuple(hi), r)
    return a


@dataclass(frozen=True)
class NonlinearModel:
    """One-step evolution map x -> A x (+ quadratic_gain * x*x elementwise)."""

    kind: str
    matrix: np.ndarray
    dt: float
    quadratic_gain: float = 0.0
    advection: float = 0.0
    diffusion: float = 0.0

    def __post_init__(self):
        if self.kind not in (LINEAR, QUADRATIC):
            raise DomainError(f"unknown model kind {self.kind!r}")
        if self.kind == LINEAR and self.quadratic_gain != 0.0:
            raise DomainError("linear kind requires quadratic_gain == 0")
        if not self.dt > 0:
            raise DomainError("dt must be > 0")
        if self.diffusion < 0:
            raise DomainError("diffusion must be >= 0")
        m = _readonly(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DomainError("model matrix must be square")
        object.__setattr__(self, "matrix", m)
        rho = np.max(np.abs(np.linalg.eigvals(m)))
        cap = 1.0 + 10.0 * self.diffusion
        if rho > cap * (1.0 + 1e-9):
            raise DomainError(f"unstable stencil: spectral radius {rho:.6g} > {cap:.6g}")

    @classmethod
    def advection_diffusion(cls, layout, dt, advection=0.0, diffusion=0.0,
                            quadratic_gain=0.0, kind=None):
        """Build the periodic stencil on a layout; same stencil per composition."""
        if kind is None:
            kind = QUADRATIC if quadratic_gain != 0.0 else LINEAR
        spatial = _spatial_stencil(layout.grid, advection, diffusion, dt)
        full = np.kron(spatial, np.eye(layout.compositions.p))
        return cls(kind, full, dt, quadratic_gain, advection, diffusion)

    @classmethod
    def from_matrix(cls, matrix, dt, quadratic_gain=0.0):
        kind = QUADRATIC if quadratic_gain != 0.0 else LINEAR
        return cls(kind, np.asarray(matrix, dtype=float), dt, quadratic_gain)

    @property
    def n(self):
        return self.matrix.shape[0]

    def step(self, values):
        """Apply m once to raw state values."""
        out = self.matrix @ values
        if self.quadratic_gain != 0.0:
            out = out + self.quadratic_gain * values * values
        return out


class TangentLinearModel:
    """Jacobian of the evolution at the zero state; advances one dt per product.

    Step products are memoized, so repeated window solves reuse the same
    matrices bit for bit.
    """

    def __init__(self, matrix, dt):
        if not dt > 0:
            raise DomainError("dt must be > 0")
        m = _readonly(matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DomainError("tangent-linear matrix must be square")
        self.matrix = m
        self.dt = float(dt)
        self._powers = {0: _readonly(np.eye(m.shape[0])), 1: m}
        self._lock = threading.Lock()

    @property
    def n(self):
        return self.matrix.shape[0]

    def power(self, k):
        """M applied k times; k = 0 is the identity convention."""
        k = int(k)
        if k < 0:
            raise DomainError("power requires k >= 0")
        with self._lock:
            if k not in self._powers:
                self._powers[k] = _readonly(np.linalg.matrix_power(self.matrix, k))
            return self._powers[k]


def tangent_linear_at_zero(model):
    """Analytic Jacobian of m at 0; equals the stencil for both kinds."""
    return TangentLinearModel(model.matrix, model.dt)


def evolve_nonlinear(model, state, steps):
    """Apply m exactly `steps` times, advancing time_index by steps."""
    if steps < 1 or int(steps) != steps:
        raise DomainError("steps must be a positive integer")
    if state.n != model.n:
        raise DomainError(f"state length {state.n} != model size {model.n}")
    values = state.values
    for j in range(int(steps)):
        values = model.step(values)
        if not np.all(np.isfinite(values)):
            raise DivergenceError(f"state became non-finite at step {j + 1}", step=j + 1)
    return StateVector(values, state.time_index + int(steps))


def propagator_product(tlm, from_time, to_time):
    """Product of tangent-linear steps carrying a state from from_time to to_time.

    Both times must be multiples of the model dt; equal times give the
    identity.
    """
    span = float(to_time) - float(from_time)
    if span < 0:
        raise DomainError("to_time must be >= from_time")
    k = span / tlm.dt
    if abs(k - round(k)) > _TIME_ALIGN_RTOL * max(1.0, abs(k)):
        raise DomainError(f"time span {span} is not a multiple of dt={tlm.dt}")
    return tlm.power(int(round(k)))
