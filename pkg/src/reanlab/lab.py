"""Ensemble experiments on the analysis series.

Each ensemble member reruns the whole assimilation with its own noise
substreams, which makes the analyses an empirical random object:

* moments: per (cycle, location, composition) mean/variance across members,
  with optional full covariance tracking;
* affinity: the analysis is an affine map of the observations, probed
  against the gain operators;
* analytic covariance: the observation-noise pushforward sum(K R K^T)
  versus the ensemble sample covariance;
* shift replay: the stored per-window observation sets are advanced through
  a left shift and re-solved, reproducing the original series bit for bit,
  so the whole series is one sample path generated by iterating the shift;
* neighborhood replay: the same construction across grid cells at a fixed
  time, pairing each cell's sample element with its first-order neighbors;
* error dissection: per-cycle split into model-input error, accumulated
  model discrepancy and observation error, with their cross-member
  correlation pattern.
"""

from dataclasses import dataclass

import numpy as np

from . import cycle as cycle_mod
from .config import RunConfig
from .cost import gain_operators
from .errors import ConfigError, DomainError
from .experiment import Experiment, build_experiment, run_member
from .world import SeedPlan

EXACT_TOL = 1e-10


def _as_experiment(scenario):
    if isinstance(scenario, Experiment):
        return scenario
    if isinstance(scenario, RunConfig):
        return build_experiment(scenario)
    raise DomainError("scenario must be a RunConfig or an Experiment")


class MomentAccumulator:
    """Streaming mean/variance (optionally covariance) with mergeable state."""

    def __init__(self, shape, track_covariance=False):
        self.count = 0
        self.mean = np.zeros(shape)
        self._m2 = np.zeros(shape)
        self._cov_m2 = np.zeros(shape + shape[-1:]) if track_covariance else None

    def update(self, x):
        x = np.asarray(x, dtype=float)
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        delta2 = x - self.mean
        self._m2 += delta * delta2
        if self._cov_m2 is not None:
            self._cov_m2 += delta[..., :, None] * delta2[..., None, :]

    def merge(self, other):
        """Combine two accumulators; the reduction is order-independent."""
        if other.count == 0:
            return self
        if self.count == 0:
            self.count = other.count
            self.mean = other.mean.copy()
            self._m2 = other._m2.copy()
            if self._cov_m2 is not None:
                self._cov_m2 = other._cov_m2.copy()
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * (other.count / total)
        scale = self.count * other.count / total
        self._m2 += other._m2 + delta * delta * scale
        if self._cov_m2 is not None:
            self._cov_m2 += other._cov_m2 + delta[..., :, None] * delta[..., None, :] * scale
        self.count = total
        return self

    def variance(self, ddof=1):
        if self.count <= ddof:
            raise DomainError("not enough samples for the requested ddof")
        return self._m2 / (self.count - ddof)

    def covariance(self, ddof=1):
        if self._cov_m2 is None:
            raise DomainError("covariance tracking was not enabled")
        if self.count <= ddof:
            raise DomainError("not enough samples for the requested ddof")
        return self._cov_m2 / (self.count - ddof)


@dataclass(frozen=True)
class EnsembleResult:
    """Cross-member moments of the analysis series."""

    members: int
    mean: np.ndarray              # (K, n)
    variance: np.ndarray          # (K, n), sample variance
    covariance: np.ndarray = None  # (K, n, n) when tracked

    def correlation(self, k):
        """Sample correlation matrix of the analyses at cycle k."""
        if self.covariance is None:
            raise DomainError("covariance tracking was not enabled")
        c = self.covariance[k]
        d = np.sqrt(np.diag(c))
        with np.errstate(invalid="ignore", divide="ignore"):
            r = c / np.outer(d, d)
        return np.clip(r, -1.0, 1.0)


def ensemble_analysis(n_members, scenario, track_covariance=None, member_hook=None):
    """Run n_members independent members and reduce their analysis series.

    Members share everything except their noise substreams.  member_hook,
    when given, sees every MemberRun as it completes.
    """
    if n_members < 2:
        raise DomainError("an ensemble needs at least 2 members")
    exp = _as_experiment(scenario)
    if track_covariance is None:
        track_covariance = exp.cfg["lab"]["track_covariance"]
    acc = MomentAccumulator(
        (exp.cycle_cfg.n_cycles, exp.n), track_covariance=track_covariance
    )
    for m in range(int(n_members)):
        run = run_member(exp, m)
        acc.update(run.series.stacked())
        if member_hook is not None:
            member_hook(run)
    return EnsembleResult(
        members=acc.count,
        mean=acc.mean,
        variance=acc.variance(),
        covariance=acc.covariance() if track_covariance else None,
    )


def analytic_analysis_covariance(problem, r_true):
    """Covariance of the analysis under observation noise: sum_i K_i R_i K_i^T.

    r_true is either a noise standard deviation (diagonal true error) or one
    covariance matrix per observation batch.
    """
    gains = gain_operators(problem)
    out = np.zeros((problem.n, problem.n))
    for i, k in enumerate(gains.observation_gains):
        if np.isscalar(r_true):
            out += float(r_true) ** 2 * (k @ k.T)
        else:
            out += k @ np.asarray(r_true[i], dtype=float) @ k.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class CovarianceReport:
    """Ensemble sample covariance against the analytic pushforward."""

    members: int
    analytic: np.ndarray
    sample: np.ndarray
    max_abs_diff: float
    mc_band: np.ndarray           # 5 x the Monte Carlo std of each sample entry
    within_band: bool
    rel_diff: float               # max |diff| / max |analytic|

    @property
    def passed(self):
        return bool(self.within_band)


def ensemble_covariance_check(problem, sigma_r_true, members, master_seed=0):
    """Monte Carlo check of the analysis covariance on one window problem.

    Members differ only in observation noise drawn around the problem's
    stored values; every member goes through the ordinary window solver.
    """
    if members < 2:
        raise DomainError("need at least 2 members")
    plan = SeedPlan(master_seed)
    base = [ob.y for ob in problem.observations]
    acc = MomentAccumulator((problem.n,), track_covariance=True)
    for m in range(int(members)):
        rng = plan.stream(m, 0, "obs")
        ys = [y + sigma_r_true * rng.standard_normal(y.size) for y in base]
        res = cycle_mod.solve_window(problem.with_observation_values(ys))
        acc.update(res.x_A.values)
    sample = acc.covariance()
    analytic = analytic_analysis_covariance(problem, sigma_r_true)
    diff = np.abs(sample - analytic)
    d = np.diag(analytic)
    mc_sigma = np.sqrt((np.outer(d, d) + analytic**2) / members)
    band = 5.0 * mc_sigma
    scale = np.max(np.abs(analytic), initial=0.0)
    return CovarianceReport(
        members=int(members),
        analytic=analytic,
        sample=sample,
        max_abs_diff=float(diff.max(initial=0.0)),
        mc_band=band,
        within_band=bool(np.all(diff <= band + EXACT_TOL)),
        rel_diff=float(diff.max(initial=0.0) / scale) if scale > 0 else 0.0,
    )


@dataclass(frozen=True)
class AffineReport:
    """Residuals of the affine structure of the analysis in the observations."""

    constant_residual: float      # zero-observation probe vs L x_b
    gain_residual: float          # unit probes vs the K_i columns
    superposition_residual: float
    scaling_residual: float
    trials: int
    tol: float

    @property
    def worst(self):
        return max(self.constant_residual, self.gain_residual,
                   self.superposition_residual, self.scaling_residual)

    @property
    def passed(self):
        return self.worst <= self.tol


def verify_affine(problem, trials=5, seed=0, tol=EXACT_TOL):
    """Probe y -> x_A(y) and compare against the gain operators.

    The zero probe recovers the constant term L x_b, unit probes recover the
    K_i columns exactly (finite differences of an affine map are exact), and
    random probes check superposition and scaling.
    """
    if trials < 3:
        raise DomainError("need at least 3 trials")
    gains = gain_operators(problem)
    sizes = [ob.y.size for ob in problem.observations]

    def solve_with(ys):
        res = cycle_mod.solve_window(problem.with_observation_values(ys))
        return res.x_A.values

    zeros = [np.zeros(s) for s in sizes]
    c = solve_with(zeros)
    c_resid = float(np.max(np.abs(c - gains.constant_term(problem.x_b)), initial=0.0))

    gain_resid = 0.0
    for i, s in enumerate(sizes):
        for j in range(s):
            probe = [np.zeros(sz) for sz in sizes]
            probe[i][j] = 1.0
            col = solve_with(probe) - c
            gain_resid = max(
                gain_resid,
                float(np.max(np.abs(col - gains.observation_gains[i][:, j]), initial=0.0)),
            )

    rng = np.random.default_rng(seed)
    sup_resid = 0.0
    scale_resid = 0.0
    for _ in range(int(trials)):
        ya = [rng.standard_normal(s) for s in sizes]
        yb = [rng.standard_normal(s) for s in sizes]
        fa = solve_with(ya) - c
        fb = solve_with(yb) - c
        fab = solve_with([a + b for a, b in zip(ya, yb)]) - c
        sup_resid = max(sup_resid, float(np.max(np.abs(fab - fa - fb), initial=0.0)))
        f3 = solve_with([3.0 * a for a in ya]) - c
        scale_resid = max(scale_resid, float(np.max(np.abs(f3 - 3.0 * fa), initial=0.0)))

    return AffineReport(
        constant_residual=c_resid,
        gain_residual=gain_resid,
        superposition_residual=sup_resid,
        scaling_residual=scale_resid,
        trials=int(trials),
        tol=tol,
    )


@dataclass(frozen=True)
class ShiftReport:
    """Bitwise outcome of the window-shift replay, one row per cycle."""

    checks: tuple                 # (k, matched) pairs

    @property
    def passed(self):
        return all(ok for _, ok in self.checks)

    def failing_cycles(self):
        return [k for k, ok in self.checks if not ok]


def shift_map_demo(exp, run):
    """Replay the stored observation sequence through repeated left shifts.

    The window-solve map is fixed; advancing the stored sample sequence by
    one window per application and re-solving reproduces every analysis bit
    for bit, exhibiting the series as one sample path.
    """
    seq = list(run.omegas)
    x_b = run.series.backgrounds[0]
    checks = []
    for k in range(run.series.n_cycles):
        head = seq[0]
        result = exp.replay_window(x_b, head)
        matched = bool(
            np.array_equal(result.x_A.values, run.series.analyses[k].x_A.values)
        )
        checks.append((k, matched))
        x_b = cycle_mod.make_background(
            k + 1, result, exp.tlm, exp.cycle_cfg.window_steps
        )
        seq = seq[1:]
    return ShiftReport(tuple(checks))


@dataclass(frozen=True)
class NeighborhoodReport:
    """Bitwise outcome of the cell-shift replay at a fixed time."""

    checks: tuple                 # (position, neighbor, matched) triples
    distinct_elements: bool

    @property
    def passed(self):
        return all(ok for _, _, ok in self.checks)

    def failing_pairs(self):
        return [(j, nb) for j, nb, ok in self.checks if not ok]


def _neighborhood_config(cfg):
    """One-window scenario observing every composition at every centroid."""
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in cfg.raw.items()}
    grid = raw["grid"]
    n_cells = grid["n_cells"] if grid["dim"] == 1 else grid["n_cells"][0] * grid["n_cells"][1]
    raw["observations"] = {
        "times": [0],
        "count": n_cells,
        "placement": "centroid",
        "compositions": "all",
        "sigma_r_true": cfg["observations"]["sigma_r_true"],
    }
    raw["cycle"] = dict(raw["cycle"], n_cycles=1)
    from .config import validate_config

    return validate_config(raw)


def neighborhood_shift_demo(scenario, member=0):
    """Spatial analogue of the shift replay on first-order neighbor pairs.

    Runs a one-window scenario with one observation per (cell, composition),
    so each cell owns its own sample element.  The replayed analysis is the
    realized map from sample elements to analysis values; shifting elements
    between first-order neighbors and re-evaluating must reproduce the
    stored per-cell analysis values bit for bit.
    """
    if isinstance(scenario, Experiment):
        cfg = scenario.cfg
    else:
        cfg = scenario
    exp = build_experiment(_neighborhood_config(cfg))
    run = run_member(exp, member)
    layout = exp.layout
    p = layout.compositions.p
    omega = run.omegas[0]
    y = omega.values[0]
    stored = run.series.analyses[0].x_A.values

    # stations sit at the centroids in order, so cell s owns y[s*P:(s+1)*P]
    elements = [tuple(y[s * p:(s + 1) * p]) for s in range(layout.grid.n_cells)]
    distinct = len(set(elements)) == len(elements)

    replayed = exp.replay_window(run.series.backgrounds[0], omega).x_A.values
    checks = []
    for j in range(layout.grid.n_cells):
        for nb in layout.grid.first_order_neighbors(j):
            # the one-spacing shift maps cell nb's element onto cell j's slot;
            # evaluating the realized map there must give the analysis at nb
            block = slice(nb * p, (nb + 1) * p)
            checks.append((j, nb, bool(np.array_equal(replayed[block], stored[block]))))
    return NeighborhoodReport(tuple(checks), distinct_elements=distinct)


@dataclass(frozen=True)
class ErrorLedger:
    """Per-cycle error split for one member.

    input error   x_b - truth at the window start;
    discrepancy   the window-accumulated defect of the linearized model,
                  sum over steps of m_true(x) - M x along the analyzed
                  trajectory (zero for a perfect linear model);
    obs error     y - H truth stacked over the window's observations.
    """

    input_errors: tuple
    model_discrepancies: tuple
    obs_errors: tuple

    @property
    def n_cycles(self):
        return len(self.input_errors)

    def norms(self):
        """(K, 3) Euclidean norms with columns input/discrepancy/observation."""
        return np.array(
            [
                [
                    np.linalg.norm(self.input_errors[k]),
                    np.linalg.norm(self.model_discrepancies[k]),
                    np.linalg.norm(self.obs_errors[k]),
                ]
                for k in range(self.n_cycles)
            ]
        )


def compute_error_ledger(exp, run):
    """Split one member's per-cycle errors into the three ledger components."""
    q = exp.cycle_cfg.window_steps
    inputs, discs, obs_errs = [], [], []
    for k in range(run.series.n_cycles):
        start = k * q
        inputs.append(run.series.backgrounds[k].values - run.truth.at_step(start))
        s = run.series.analyses[k].x_A.values
        defect = np.zeros(exp.n)
        for _ in range(q):
            linear = exp.tlm.matrix @ s
            defect += exp.true_model.step(s) - linear
            s = linear
        discs.append(defect)
        omega = run.omegas[k]
        pieces = [
            y - exp.operators_by_offset[step - start].matrix @ run.truth.at_step(step)
            for step, y in zip(omega.steps, omega.values)
        ]
        obs_errs.append(np.concatenate(pieces) if pieces else np.zeros(0))
    return ErrorLedger(tuple(inputs), tuple(discs), tuple(obs_errs))


_PAIRS = (("input", "discrepancy"), ("input", "observation"),
          ("discrepancy", "observation"))
_COMPONENTS = ("input", "discrepancy", "observation")


def _pearson(a, b):
    if np.std(a) < 1e-15 * (1.0 + np.abs(a).max(initial=0.0)):
        return None
    if np.std(b) < 1e-15 * (1.0 + np.abs(b).max(initial=0.0)):
        return None
    return float(np.corrcoef(a, b)[0, 1])


@dataclass(frozen=True)
class CorrelationRow:
    pair: str
    cycle: int
    rho: object                   # float or None when degenerate
    ci_low: object
    ci_high: object
    expected: str                 # "zero" | "nonzero" | "null"
    passed: bool


@dataclass(frozen=True)
class DissectionReport:
    """Ensemble correlation structure of the three error components."""

    members: int
    threshold: float
    rows: tuple                   # CorrelationRow per (pair, cycle)
    grid_correlations: np.ndarray      # (K, P, N, N)
    composition_correlations: np.ndarray  # (K, N, P, P)
    member0_ledger: ErrorLedger
    mean_norms: np.ndarray        # (K, 3)

    @property
    def pattern_pass(self):
        return all(r.passed for r in self.rows)


def error_dissection(scenario, n_members=None, min_members=200):
    """Ensemble dissection of the error dependence pattern.

    Cycle 0's three components come from independent sources, so their
    cross-member correlations should vanish; from cycle 1 on the input error
    inherits the propagated analysis and stays correlated with the model
    discrepancy while both remain uncorrelated with the fresh observation
    noise.
    """
    exp = _as_experiment(scenario)
    cfg = exp.cfg
    members = int(n_members if n_members is not None else cfg["lab"]["members"])
    if members < min_members:
        raise ConfigError(f"error dissection needs >= {min_members} members, got {members}")
    k_cycles = exp.cycle_cfg.n_cycles
    n_cells = exp.layout.grid.n_cells
    p = exp.layout.compositions.p

    norms = np.empty((members, k_cycles, 3))
    total_errors = np.empty((members, k_cycles, exp.n))
    ledger0 = None
    for m in range(members):
        run = run_member(exp, m)
        ledger = compute_error_ledger(exp, run)
        norms[m] = ledger.norms()
        for k in range(k_cycles):
            total_errors[m, k] = (
                run.series.analyses[k].x_A.values - run.truth.at_step(k * exp.cycle_cfg.window_steps)
            )
        if m == 0:
            ledger0 = ledger

    threshold = cfg["lab"]["significance_factor"] / np.sqrt(members)
    boot = cfg["lab"]["bootstrap_samples"]
    rng = exp.plan.stream(0, 0, "bootstrap")
    rows = []
    for k in range(k_cycles):
        for (name_a, name_b) in _PAIRS:
            a = norms[:, k, _COMPONENTS.index(name_a)]
            b = norms[:, k, _COMPONENTS.index(name_b)]
            rho = _pearson(a, b)
            if rho is None:
                rows.append(CorrelationRow(f"{name_a}_vs_{name_b}", k, None, None, None,
                                           "null", True))
                continue
            samples = np.empty(boot)
            for r in range(boot):
                idx = rng.integers(0, members, size=members)
                rb = _pearson(a[idx], b[idx])
                samples[r] = rho if rb is None else rb
            ci_low, ci_high = np.percentile(samples, [2.5, 97.5])
            expected = "nonzero" if (k >= 1 and (name_a, name_b) == ("input", "discrepancy")) else "zero"
            passed = abs(rho) > threshold if expected == "nonzero" else abs(rho) <= threshold
            rows.append(CorrelationRow(f"{name_a}_vs_{name_b}", k, rho,
                                       float(ci_low), float(ci_high), expected, bool(passed)))

    grid_corr = np.full((k_cycles, p, n_cells, n_cells), np.nan)
    comp_corr = np.full((k_cycles, n_cells, p, p), np.nan)
    for k in range(k_cycles):
        e = total_errors[:, k, :]
        stds = e.std(axis=0)
        ok = stds > 1e-15 * (1.0 + np.abs(e).max(initial=0.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            full = np.corrcoef(e, rowvar=False)
        full = np.where(np.outer(ok, ok), full, np.nan)
        full = np.clip(full, -1.0, 1.0)
        for c in range(p):
            cols = np.arange(n_cells) * p + c
            grid_corr[k, c] = full[np.ix_(cols, cols)]
        for loc in range(n_cells):
            cols = loc * p + np.arange(p)
            comp_corr[k, loc] = full[np.ix_(cols, cols)]

    return DissectionReport(
        members=members,
        threshold=float(threshold),
        rows=tuple(rows),
        grid_correlations=grid_corr,
        composition_correlations=comp_corr,
        member0_ledger=ledger0,
        mean_norms=norms.mean(axis=0),
    )
