"""Hidden ground truth and seeded observation sampling.

The truth trajectory follows the configured "true" dynamics plus spatially
correlated Gaussian innovations; observations are the truth interpolated to
the measurement locations plus independent Gaussian noise.  All randomness
flows through counter-based substreams, one per (member, window, purpose)
triple, so ensemble members are reproducible and order-independent.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, DomainError
from .grid import exponential_covariance

RNG_ALGORITHM = "philox"

_PURPOSES = {"truth": 0, "obs": 1, "guess": 2, "geometry": 3, "bootstrap": 4}


@dataclass(frozen=True)
class SeedPlan:
    """Maps (member, window, purpose) triples to independent random streams."""

    master_seed: int

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise DomainError("master_seed must fit in 64 bits")
        object.__setattr__(self, "master_seed", int(self.master_seed))

    def stream(self, member, window, purpose):
        if purpose not in _PURPOSES:
            raise DomainError(f"unknown stream purpose {purpose!r}")
        if member < 0 or window < 0:
            raise DomainError("member and window indices must be >= 0")
        seq = np.random.SeedSequence(
            entropy=self.master_seed,
            spawn_key=(int(member), int(window), _PURPOSES[purpose]),
        )
        return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class NoiseSpec:
    """Diagonal observation-error model for the sampled measurements."""

    sigma_r: float

    def __post_init__(self):
        if self.sigma_r < 0:
            raise DomainError("sigma_r must be >= 0")

    def matrix(self, m_obs):
        return self.sigma_r**2 * np.eye(m_obs)


@dataclass(frozen=True)
class HiddenProcess:
    """A realized truth trajectory, one row per model step."""

    trajectory: np.ndarray
    corr_length: float
    sigma_w: float
    dynamics: "NonlinearModel"

    def __post_init__(self):
        t = np.ascontiguousarray(np.asarray(self.trajectory, dtype=float))
        t.setflags(write=False)
        object.__setattr__(self, "trajectory", t)

    @property
    def n_steps(self):
        return self.trajectory.shape[0] - 1

    def at_step(self, j):
        if not 0 <= j < self.trajectory.shape[0]:
            raise DomainError(f"step {j} outside the simulated trajectory")
        return self.trajectory[j]


def innovation_chol(layout, sigma_w, corr_length):
    """Cholesky factor of the per-composition exponential innovation covariance."""
    spatial = exponential_covariance(layout.grid, 1.0, corr_length)
    cov = sigma_w**2 * np.kron(spatial, np.eye(layout.compositions.p))
    return np.linalg.cholesky(cov)


def simulate_truth(model, layout, steps, rng, sigma_w=0.0, corr_length=None,
                   initial=None):
    """Integrate the true dynamics for `steps` steps with seeded innovations.

    initial may be an explicit state vector or None, in which case one
    correlated field is drawn from the innovation covariance (zeros when
    sigma_w is 0).
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    if corr_length is None:
        corr_length = 2.0 * layout.grid.spacing
    n = layout.n
    chol = innovation_chol(layout, sigma_w, corr_length) if sigma_w > 0 else None
    if initial is None:
        x0 = chol @ rng.standard_normal(n) if chol is not None else np.zeros(n)
    else:
        x0 = np.asarray(initial, dtype=float).ravel()
        if x0.size != n:
            raise DomainError(f"initial state length {x0.size} != {n}")
    traj = np.empty((steps + 1, n))
    traj[0] = x0
    for j in range(steps):
        nxt = model.step(traj[j])
        if chol is not None:
            nxt = nxt + chol @ rng.standard_normal(n)
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"truth became non-finite at step {j + 1}", step=j + 1)
        traj[j + 1] = nxt
    return HiddenProcess(traj, float(corr_length), float(sigma_w), model)


@dataclass(frozen=True)
class ObservationSet:
    """The realized observations of one window: the window's sample element."""

    window: int
    steps: tuple          # absolute step indices
    values: tuple         # one vector per step, aligned with `steps`

    def __post_init__(self):
        vals = tuple(np.asarray(v, dtype=float).ravel() for v in self.values)
        for v in vals:
            v.setflags(write=False)
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))
        object.__setattr__(self, "values", vals)


def sample_observations(truth, operators_by_offset, noise, plan, member, window,
                        window_start, offsets):
    """y = H truth + eps at each offset, noise streamed by absolute step.

    Keying the noise stream on the absolute observation step makes an
    observation at a shared window endpoint identical in both adjacent
    windows.
    """
    steps = []
    values = []
    for offset in offsets:
        step = window_start + int(offset)
        if not 0 <= step <= truth.n_steps:
            raise DomainError(f"window step {step} outside the truth trajectory")
        h = operators_by_offset[offset]
        y = h.matrix @ truth.at_step(step)
        if noise.sigma_r > 0:
            rng = plan.stream(member, step, "obs")
            y = y + noise.sigma_r * rng.standard_normal(h.m_obs)
        steps.append(step)
        values.append(y)
    return ObservationSet(window=window, steps=tuple(steps), values=tuple(values))
