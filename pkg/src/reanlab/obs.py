"""Observation operators: sparse interpolation from state to measured values.

A 1-D observation at x_T between centroids x2 < x_T < x3 gets the two
convex weights

    alpha = (x3 - x_T) / (x3 - x2)      on the x2 column,
    beta  = (x_T - x2) / (x3 - x2)      on the x3 column,

an observation exactly at a centroid gets a single 1, and the 2-D operator
is the bilinear tensor product of the per-axis rule.  Rows therefore sum to
one and carry at most 2 (1-D) or 4 (2-D) nonzeros, all inside the block of
the observed composition.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import DomainError

_ROWSUM_TOL = 1e-12


@dataclass(frozen=True)
class ObservationGeometry:
    """Where and what is observed inside one window.

    times are step offsets from the window start; locations[i] is an
    (m_i, dim) coordinate array for times[i]; compositions[i] gives the
    composition index measured by each of those m_i observations.
    """

    times: tuple
    locations: tuple
    compositions: tuple

    def __post_init__(self):
        times = tuple(int(t) for t in self.times)
        if any(t < 0 for t in times):
            raise DomainError("observation time offsets must be >= 0")
        if not (len(times) == len(self.locations) == len(self.compositions)):
            raise DomainError("times, locations and compositions must align")
        locs = []
        comps = []
        for pts, cs in zip(self.locations, self.compositions):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            cs = tuple(int(c) for c in cs)
            if pts.shape[0] != len(cs):
                raise DomainError("one composition index required per observation")
            pts.setflags(write=False)
            locs.append(pts)
            comps.append(cs)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "locations", tuple(locs))
        object.__setattr__(self, "compositions", tuple(comps))

    def at_time(self, t):
        i = self.times.index(t)
        return self.locations[i], self.compositions[i]


@dataclass(frozen=True)
class ObsOperator:
    """Sparse m_obs x n interpolation matrix for one observation time."""

    matrix: sparse.csr_matrix

    def __post_init__(self):
        h = sparse.csr_matrix(self.matrix, dtype=float)
        h.eliminate_zeros()
        if h.nnz == 0:
            raise DomainError("observation operator has no entries")
        if h.data.min() < -_ROWSUM_TOL or h.data.max() > 1 + _ROWSUM_TOL:
            raise DomainError("interpolation weights must lie in [0, 1]")
        rowsums = np.asarray(h.sum(axis=1)).ravel()
        if np.max(np.abs(rowsums - 1.0)) > _ROWSUM_TOL:
            raise DomainError("every operator row must sum to 1")
        if np.diff(h.indptr).max() > 4:
            raise DomainError("rows may carry at most 4 interpolation weights")
        object.__setattr__(self, "matrix", h)

    @property
    def m_obs(self):
        return self.matrix.shape[0]

    @property
    def n(self):
        return self.matrix.shape[1]

    @classmethod
    def from_dense(cls, a):
        return cls(sparse.csr_matrix(np.asarray(a, dtype=float)))

    def dense(self):
        return self.matrix.toarray()


def _axis_weights(axis, x):
    """Bracketing index and convex weight pair along one lattice axis."""
    if x < axis[0] or x > axis[-1]:
        raise DomainError(f"observation coordinate {x} outside the grid hull")
    i = int(np.searchsorted(axis, x, side="right")) - 1
    i = min(max(i, 0), len(axis) - 2)
    lo, hi = axis[i], axis[i + 1]
    alpha = (hi - x) / (hi - lo)
    beta = (x - lo) / (hi - lo)
    return i, alpha, beta


def build_H(layout, obs_geom, t):
    """Interpolation operator for the observations at window offset t."""
    grid = layout.grid
    p = layout.compositions.p
    try:
        points, comps = obs_geom.at_time(t)
    except ValueError:
        raise DomainError(f"no observations at time offset {t}") from None
    rows, cols, vals = [], [], []
    for r, (pt, comp) in enumerate(zip(points, comps)):
        if not 0 <= comp < p:
            raise DomainError(f"composition index {comp} out of range")
        if pt.shape[0] != grid.dim:
            raise DomainError(f"observation location {pt} has wrong dimension")
        # per-axis convex weights, then their tensor product
        per_axis = [_axis_weights(grid.axes[k], pt[k]) for k in range(grid.dim)]
        cells = [()]
        weights = [1.0]
        for i, alpha, beta in per_axis:
            cells = [c + (i,) for c in cells] + [c + (i + 1,) for c in cells]
            weights = [w * alpha for w in weights] + [w * beta for w in weights]
        for cell_idx, w in zip(cells, weights):
            if w == 0.0:
                continue
            rows.append(r)
            cols.append(layout.flat_index(grid.cell_index(cell_idx), comp))
            vals.append(w)
    h = sparse.csr_matrix((vals, (rows, cols)), shape=(len(points), layout.n))
    return ObsOperator(h)


def predict_observations(op, state):
    """H x: the state interpolated to the observation locations."""
    values = state.values if hasattr(state, "values") else np.asarray(state, dtype=float)
    if values.size != op.n:
        raise DomainError(f"state length {values.size} != operator width {op.n}")
    return op.matrix @ values
