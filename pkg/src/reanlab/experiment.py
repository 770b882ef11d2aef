"""Assembly of a runnable experiment from a validated configuration.

This is the only layer that sees both the hidden world and the assimilation
system: it draws truths and observations, resolves the first-window guess,
and feeds the cycle driver.  The replay helpers rebuild window problems from
stored observation sets through the exact same code path, so replays are
bit-identical to the original run.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import cost, cycle, dynamics, obs, world
from .config import RunConfig
from .errors import ConfigError, DomainError
from .grid import CompositionSet, GridGeometry, StateLayout, StateVector


def build_layout(grid_cfg):
    if grid_cfg["dim"] == 1:
        grid = GridGeometry.line(grid_cfg["n_cells"], grid_cfg["spacing"])
    else:
        grid = GridGeometry.rect(tuple(grid_cfg["n_cells"]), grid_cfg["spacing"])
    return StateLayout(grid, CompositionSet(tuple(grid_cfg["compositions"])))


def build_model(layout, block):
    return dynamics.NonlinearModel.advection_diffusion(
        layout,
        dt=block["dt"],
        advection=block["advection"],
        diffusion=block["diffusion"],
        quadratic_gain=block["quadratic_gain"],
        kind=block["kind"],
    )


def _station_coords(layout, obs_cfg, plan):
    """Fixed station coordinates, shared by every window and member."""
    grid = layout.grid
    count = obs_cfg["count"]
    placement = obs_cfg["placement"]
    if placement == "fixed":
        pts = np.atleast_2d(np.asarray(obs_cfg["locations"], dtype=float))
        if pts.shape != (count, grid.dim):
            raise ConfigError(f"fixed locations must have shape ({count}, {grid.dim})")
        return pts
    if placement == "centroid":
        idx = np.floor(np.arange(count) * grid.n_cells / count).astype(int) % grid.n_cells
        return grid.centroids[idx]
    rng = plan.stream(0, 0, "geometry")
    lows = np.array([a[0] for a in grid.axes])
    highs = np.array([a[-1] for a in grid.axes])
    return lows + (highs - lows) * rng.random((count, grid.dim))


@dataclass(frozen=True)
class Experiment:
    """Everything a run needs, assembled once and shared across members."""

    cfg: RunConfig
    layout: StateLayout
    da_model: dynamics.NonlinearModel
    true_model: dynamics.NonlinearModel
    tlm: dynamics.TangentLinearModel
    background_cov: cost.Covariance
    obs_geometry: obs.ObservationGeometry
    operators_by_offset: dict
    obs_noise: world.NoiseSpec
    sigma_r_da: float
    cycle_cfg: cycle.CycleConfig
    plan: world.SeedPlan

    @property
    def n(self):
        return self.layout.n

    @property
    def total_steps(self):
        return self.cycle_cfg.window_steps * self.cycle_cfg.n_cycles

    @cached_property
    def r_by_offset(self):
        """Assumed observation-error covariance per offset (shared instances)."""
        return {
            off: cost.observation_covariance(op.m_obs, self.sigma_r_da)
            for off, op in self.operators_by_offset.items()
        }

    @cached_property
    def _shared_truth(self):
        return self._simulate_truth(member=0)

    def _simulate_truth(self, member):
        w = self.cfg["world"]
        initial = w["initial"]
        if initial == "zeros":
            init = np.zeros(self.n)
        elif initial == "draw":
            sigma0 = w["initial_sigma"]
            if sigma0 > 0:
                chol = world.innovation_chol(self.layout, sigma0, self._length_s)
                init = chol @ self.plan.stream(member, 0, "truth").standard_normal(self.n)
            else:
                init = np.zeros(self.n)
        else:
            init = np.asarray(initial, dtype=float)
        rng = self.plan.stream(member, 1, "truth")
        return world.simulate_truth(
            self.true_model,
            self.layout,
            self.total_steps,
            rng,
            sigma_w=w["sigma_w"],
            corr_length=self._length_s,
            initial=init,
        )

    @property
    def _length_s(self):
        ls = self.cfg["world"]["length_s"]
        return 2.0 * self.layout.grid.spacing if ls is None else ls

    def truth_for(self, member):
        if self.cfg["world"]["vary_truth"]:
            return self._simulate_truth(member)
        return self._shared_truth

    def initial_guess(self, member, truth):
        spec = self.cfg["cycle"]["initial_guess"]
        if spec == "zeros":
            return StateVector(np.zeros(self.n), 0)
        if spec == "truth":
            return StateVector(truth.at_step(0), 0)
        if isinstance(spec, dict):
            sigma = float(spec["perturbed_truth"])
            noise = sigma * self.plan.stream(member, 0, "guess").standard_normal(self.n)
            return StateVector(truth.at_step(0) + noise, 0)
        return self.layout.state(spec, 0)

    def sample_window(self, member, truth, k):
        """The realized observation set of window k for one member."""
        return world.sample_observations(
            truth,
            self.operators_by_offset,
            self.obs_noise,
            self.plan,
            member,
            window=k,
            window_start=k * self.cycle_cfg.window_steps,
            offsets=self.cfg["observations"]["times"],
        )

    def window_observations(self, omega):
        """Attach operators and assumed error covariances to a sampled window."""
        start = omega.window * self.cycle_cfg.window_steps
        batches = []
        for step, y in zip(omega.steps, omega.values):
            offset = step - start
            batches.append(
                cost.WindowObservation(
                    offset=offset,
                    y=y,
                    H=self.operators_by_offset[offset],
                    R=self.r_by_offset[offset],
                )
            )
        return tuple(batches)

    def window_problem(self, x_b, omega):
        return cost.WindowProblem(
            x_b=x_b,
            B=self.background_cov,
            observations=self.window_observations(omega),
            tlm=self.tlm,
            window_steps=self.cycle_cfg.window_steps,
        )

    def replay_window(self, x_b, omega):
        """Re-solve one window from its stored sample element (bit-identical)."""
        return cycle.solve_window(self.window_problem(x_b, omega))


@dataclass(frozen=True)
class MemberRun:
    """One ensemble member: its truth, sampled windows and analysis series."""

    member: int
    truth: world.HiddenProcess
    omegas: tuple
    series: cycle.AnalysisSeries


def build_experiment(cfg):
    if not isinstance(cfg, RunConfig):
        raise ConfigError("build_experiment expects a validated RunConfig")
    layout = build_layout(cfg["grid"])
    da_model = build_model(layout, cfg["dynamics"])
    true_model = build_model(layout, dict(cfg["world"], dt=cfg["dynamics"]["dt"]))
    tlm = dynamics.tangent_linear_at_zero(da_model)
    cov_cfg = cfg["covariances"]
    background_cov = cost.background_covariance(
        layout, sigma=cov_cfg["sigma_b"], corr_length=cov_cfg["length_b"]
    )
    plan = world.SeedPlan(cfg.master_seed)
    obs_cfg = cfg["observations"]
    stations = _station_coords(layout, obs_cfg, plan)
    if obs_cfg["compositions"] == "all":
        p = layout.compositions.p
        locations = np.repeat(stations, p, axis=0)
        comps = tuple(c for _ in range(len(stations)) for c in range(p))
    else:
        locations = stations
        comps = tuple(obs_cfg["compositions"])
    offsets = tuple(obs_cfg["times"])
    geometry = obs.ObservationGeometry(
        times=offsets,
        locations=tuple(locations for _ in offsets),
        compositions=tuple(comps for _ in offsets),
    )
    operators = {off: obs.build_H(layout, geometry, off) for off in offsets}
    return Experiment(
        cfg=cfg,
        layout=layout,
        da_model=da_model,
        true_model=true_model,
        tlm=tlm,
        background_cov=background_cov,
        obs_geometry=geometry,
        operators_by_offset=operators,
        obs_noise=world.NoiseSpec(obs_cfg["sigma_r_true"]),
        sigma_r_da=cov_cfg["sigma_r"],
        cycle_cfg=cycle.CycleConfig(
            window_steps=cfg["cycle"]["window_steps"],
            n_cycles=cfg["cycle"]["n_cycles"],
        ),
        plan=plan,
    )


def run_member(exp, member=0):
    """Simulate one member's world and assimilate it."""
    truth = exp.truth_for(member)
    omegas = tuple(
        exp.sample_window(member, truth, k) for k in range(exp.cycle_cfg.n_cycles)
    )
    guess = exp.initial_guess(member, truth)
    windows = tuple(exp.window_observations(om) for om in omegas)
    series = cycle.run_reanalysis(
        guess, windows, exp.background_cov, exp.tlm, exp.cycle_cfg
    )
    return MemberRun(member=member, truth=truth, omegas=omegas, series=series)
