"""Grid geometry, state-vector layout and the indexing shared by all modules.

States are stored location-major: the P composition values of one grid cell
are contiguous, so ``flat_index(loc, comp) = loc * P + comp``.  Covariances
that couple locations within each composition but never across compositions
are then Kronecker products ``spatial (N x N)  (x)  I_P``, and a fixed
permutation (owned by this module) maps to composition-major ordering where
those matrices are block diagonal.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DomainError

_LATTICE_RTOL = 1e-9


def _readonly(a):
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridGeometry:
    """Uniform 1-D or 2-D grid of cell centroids, ordered lexicographically.

    centroids has shape (N, dim); spacing is the uniform centroid distance
    along each axis.
    """

    dim: int
    centroids: np.ndarray
    spacing: float

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise DomainError(f"dim must be 1 or 2, got {self.dim}")
        if not self.spacing > 0:
            raise DomainError(f"spacing must be > 0, got {self.spacing}")
        c = _readonly(self.centroids)
        if c.ndim != 2 or c.shape[1] != self.dim:
            raise DomainError(f"centroids must have shape (N, {self.dim})")
        if c.shape[0] < 2:
            raise DomainError("a grid needs at least 2 centroids")
        object.__setattr__(self, "centroids", c)
        rows = [tuple(r) for r in c]
        if any(a >= b for a, b in zip(rows, rows[1:])):
            raise DomainError("centroids must be strictly increasing in lexicographic order")
        self._check_lattice()

    @classmethod
    def line(cls, n_cells, spacing=1.0, origin=0.0):
        """Regular 1-D grid of n_cells centroids."""
        coords = origin + spacing * np.arange(n_cells, dtype=float)
        return cls(1, coords[:, None], float(spacing))

    @classmethod
    def rect(cls, shape, spacing=1.0, origin=(0.0, 0.0)):
        """Regular 2-D lattice with ``shape = (n0, n1)`` cells per axis."""
        n0, n1 = shape
        a0 = origin[0] + spacing * np.arange(n0, dtype=float)
        a1 = origin[1] + spacing * np.arange(n1, dtype=float)
        pts = np.array([(x0, x1) for x0 in a0 for x1 in a1])
        return cls(2, pts, float(spacing))

    def _check_lattice(self):
        tol = _LATTICE_RTOL * self.spacing
        for k, axis in enumerate(self.axes):
            if len(axis) > 1 and np.any(np.abs(np.diff(axis) - self.spacing) > tol):
                raise DomainError(f"axis {k} is not uniform with spacing {self.spacing}")
        if int(np.prod([len(a) for a in self.axes])) != self.n_cells:
            raise DomainError("centroids do not form a full rectangular lattice")
        rebuilt = np.array(
            [tuple(pt) for pt in np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, self.dim)]
        )
        if not np.allclose(rebuilt, self.centroids, rtol=0, atol=tol):
            raise DomainError("centroids are not in lexicographic lattice order")

    @property
    def n_cells(self):
        return self.centroids.shape[0]

    @cached_property
    def axes(self):
        """Per-axis sorted unique coordinates of the lattice."""
        return tuple(np.unique(self.centroids[:, k]) for k in range(self.dim))

    @cached_property
    def axis_shape(self):
        return tuple(len(a) for a in self.axes)

    def cell_index(self, axis_indices):
        """Lexicographic cell index from per-axis indices."""
        idx = 0
        for k, i in enumerate(axis_indices):
            if not 0 <= i < self.axis_shape[k]:
                raise DomainError(f"axis index {i} out of range on axis {k}")
            idx = idx * self.axis_shape[k] + i if k else i
        return int(idx)

    def axis_indices(self, cell):
        """Inverse of :meth:`cell_index`."""
        if not 0 <= cell < self.n_cells:
            raise DomainError(f"cell index {cell} out of range")
        if self.dim == 1:
            return (int(cell),)
        n1 = self.axis_shape[1]
        return (int(cell) // n1, int(cell) % n1)

    def contains(self, point):
        """True when the point lies inside the lattice bounding box (its hull)."""
        p = np.atleast_1d(np.asarray(point, dtype=float))
        return all(a[0] <= p[k] <= a[-1] for k, a in enumerate(self.axes))

    def first_order_neighbors(self, cell):
        """Cells at Euclidean distance exactly one spacing unit (no wraparound)."""
        idx = self.axis_indices(cell)
        out = []
        for k in range(self.dim):
            for d in (-1, 1):
                moved = list(idx)
                moved[k] += d
                if 0 <= moved[k] < self.axis_shape[k]:
                    out.append(self.cell_index(tuple(moved)))
        return sorted(out)

    @cached_property
    def distance_matrix(self):
        """Pairwise Euclidean centroid distances, shape (N, N)."""
        diff = self.centroids[:, None, :] - self.centroids[None, :, :]
        return _readonly(np.sqrt((diff**2).sum(axis=-1)))


@dataclass(frozen=True)
class CompositionSet:
    """The fields carried per grid cell (e.g. PM25, BC, SU)."""

    names: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if len(names) < 1:
            raise DomainError("need at least one composition")
        if len(set(names)) != len(names):
            raise DomainError("composition names must be unique")
        object.__setattr__(self, "names", names)

    @property
    def p(self):
        return len(self.names)


@dataclass(frozen=True)
class StateLayout:
    """Binds a grid to a composition set and owns the flat state indexing."""

    grid: GridGeometry
    compositions: CompositionSet

    @property
    def n(self):
        return self.grid.n_cells * self.compositions.p

    def flat_index(self, location_index, composition_index):
        """Location-major flat index; bijective over (0..N-1) x (0..P-1)."""
        p = self.compositions.p
        if not 0 <= location_index < self.grid.n_cells:
            raise DomainError(f"location index {location_index} out of range")
        if not 0 <= composition_index < p:
            raise DomainError(f"composition index {composition_index} out of range")
        return int(location_index) * p + int(composition_index)

    def unflat_index(self, i):
        if not 0 <= i < self.n:
            raise DomainError(f"flat index {i} out of range")
        p = self.compositions.p
        return int(i) // p, int(i) % p

    def composition_major_permutation(self):
        """Permutation q with x[q] grouping each composition's block contiguously."""
        n_cells, p = self.grid.n_cells, self.compositions.p
        return np.array(
            [self.flat_index(loc, comp) for comp in range(p) for loc in range(n_cells)],
            dtype=int,
        )

    def composition_reorder_permutation(self, new_order):
        """Permutation q with x[q] laid out for compositions relabeled by new_order.

        new_order[j] is the current index of the composition that becomes j.
        """
        p = self.compositions.p
        if sorted(new_order) != list(range(p)):
            raise DomainError("new_order must be a permutation of 0..P-1")
        return np.array(
            [self.flat_index(loc, new_order[j]) for loc in range(self.grid.n_cells) for j in range(p)],
            dtype=int,
        )

    def state(self, values, time_index=0):
        """Build a StateVector, checking the length against this layout."""
        values = np.asarray(values, dtype=float).ravel()
        if values.size != self.n:
            raise DomainError(f"state length {values.size} != N*P = {self.n}")
        return StateVector(values, time_index)


@dataclass(frozen=True)
class StateVector:
    """Flattened field values at one time step.

    time_index counts model steps of length dt from the start of the run, so
    the physical time is time_index * dt.
    """

    values: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        v = _readonly(np.ravel(self.values))
        if not np.all(np.isfinite(v)):
            raise DomainError("state values must all be finite")
        if self.time_index < 0 or int(self.time_index) != self.time_index:
            raise DomainError("time_index must be a nonnegative integer")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "time_index", int(self.time_index))

    @property
    def n(self):
        return self.values.size


def exponential_covariance(grid, sigma, corr_length):
    """sigma^2 * exp(-d / corr_length) over the grid's centroid distances."""
    if not corr_length > 0:
        raise DomainError("correlation length must be > 0")
    return float(sigma) ** 2 * np.exp(-grid.distance_matrix / float(corr_length))
