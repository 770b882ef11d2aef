"""Batch command-line interface.

Subcommands: truth, observe, assimilate, ensemble, verify, report.  Every
run reads one JSON config, writes CSV files plus a meta.json (config echo,
hash, master seed, RNG algorithm, version) into the output directory, and
uses the exit-code contract 0 = pass, 1 = property failure, 2 = config or
I/O error, 3 = numeric failure.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__, lab
from .config import RunConfig, load_config
from .errors import ConfigError, NumericError, ReanlabError
from .experiment import build_experiment, run_member
from .world import RNG_ALGORITHM

EXIT_OK = 0
EXIT_PROPERTY_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_ERROR = 3

VERIFY_SUITES = ("affine", "shift", "neighborhood", "errors", "covariance", "all")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_meta(out_dir, cfg):
    meta = {
        "config": cfg.raw,
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.master_seed,
        "rng": RNG_ALGORITHM,
        "version": __version__,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _prepare(cfg, out_dir):
    out = out_dir or cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    write_meta(out, cfg)
    return out


def _state_rows(layout, values, lead):
    rows = []
    for loc in range(layout.grid.n_cells):
        for c, name in enumerate(layout.compositions.names):
            rows.append(lead + [loc, name, values[layout.flat_index(loc, c)]])
    return rows


def cmd_truth(cfg, out_dir=None):
    """Write the hidden truth trajectory: truth.csv + meta.json."""
    exp = build_experiment(cfg)
    out = _prepare(cfg, out_dir)
    truth = exp.truth_for(0)
    rows = []
    for step in range(truth.trajectory.shape[0]):
        t = step * exp.da_model.dt
        rows.extend(_state_rows(exp.layout, truth.trajectory[step], [t]))
    write_csv(os.path.join(out, "truth.csv"),
              ["time", "location", "composition", "value"], rows)
    return out


def cmd_observe(cfg, out_dir=None):
    """Write the member-0 sampled observations: observations.csv + meta.json."""
    exp = build_experiment(cfg)
    out = _prepare(cfg, out_dir)
    truth = exp.truth_for(0)
    rows = []
    dim = exp.layout.grid.dim
    for k in range(exp.cycle_cfg.n_cycles):
        omega = exp.sample_window(0, truth, k)
        start = k * exp.cycle_cfg.window_steps
        for step, y in zip(omega.steps, omega.values):
            locs, comps = exp.obs_geometry.at_time(step - start)
            for i, value in enumerate(y):
                coords = list(locs[i]) + [""] * (2 - dim)
                rows.append([k, step * exp.da_model.dt, i, coords[0], coords[1],
                             exp.layout.compositions.names[comps[i]], value])
    write_csv(os.path.join(out, "observations.csv"),
              ["window", "t", "obs_index", "loc_0", "loc_1", "composition", "y"], rows)
    return out


def cmd_assimilate(cfg, out_dir=None):
    """Run the full cycle: analyses.csv, backgrounds.csv, J_trace.csv + meta.json."""
    exp = build_experiment(cfg)
    out = _prepare(cfg, out_dir)
    run = run_member(exp, 0)
    a_rows, b_rows, j_rows = [], [], []
    for k in range(run.series.n_cycles):
        res = run.series.analyses[k]
        a_rows.extend(_state_rows(exp.layout, res.x_A.values, [k]))
        b_rows.extend(_state_rows(exp.layout, run.series.backgrounds[k].values, [k]))
        j_rows.append([k, res.J_at_min, res.gradient_norm_at_min])
    write_csv(os.path.join(out, "analyses.csv"),
              ["k", "location", "composition", "x_A"], a_rows)
    write_csv(os.path.join(out, "backgrounds.csv"),
              ["k", "location", "composition", "x_B"], b_rows)
    write_csv(os.path.join(out, "J_trace.csv"), ["k", "J_at_min", "grad_norm"], j_rows)
    return out


def cmd_ensemble(cfg, out_dir=None, members=None):
    """Run the ensemble and write per-cell moments: moments.csv + meta.json."""
    exp = build_experiment(cfg)
    out = _prepare(cfg, out_dir)
    m = members if members is not None else cfg["lab"]["members"]
    result = lab.ensemble_analysis(m, exp)
    layout = exp.layout
    rows = []
    for k in range(result.mean.shape[0]):
        for loc in range(layout.grid.n_cells):
            for c, name in enumerate(layout.compositions.names):
                i = layout.flat_index(loc, c)
                rows.append([k, loc, name, result.mean[k, i], result.variance[k, i]])
    write_csv(os.path.join(out, "moments.csv"),
              ["k", "location", "composition", "mean", "variance"], rows)
    return out


def _verify_affine(cfg, exp, rows):
    run = run_member(exp, 0)
    problem = exp.window_problem(run.series.backgrounds[0], run.omegas[0])
    rep = lab.verify_affine(problem, trials=cfg["lab"]["affine_trials"])
    rows.append(["affine", "constant_term", "", rep.constant_residual, rep.tol,
                 rep.constant_residual <= rep.tol])
    rows.append(["affine", "gain_columns", "", rep.gain_residual, rep.tol,
                 rep.gain_residual <= rep.tol])
    rows.append(["affine", "superposition", "", rep.superposition_residual, rep.tol,
                 rep.superposition_residual <= rep.tol])
    rows.append(["affine", "scaling", "", rep.scaling_residual, rep.tol,
                 rep.scaling_residual <= rep.tol])
    return rep.passed


def _verify_shift(exp, rows, out):
    run = run_member(exp, 0)
    rep = lab.shift_map_demo(exp, run)
    shift_rows = [[k, ok] for k, ok in rep.checks]
    write_csv(os.path.join(out, "shiftcheck.csv"), ["k", "pass"], shift_rows)
    for k, ok in rep.checks:
        rows.append(["shift", "bitwise_replay", k, int(ok), 1, ok])
    return rep.passed


def _verify_neighborhood(exp, rows):
    rep = lab.neighborhood_shift_demo(exp)
    for j, nb, ok in rep.checks:
        rows.append(["neighborhood", "bitwise_replay", f"{j}->{nb}", int(ok), 1, ok])
    return rep.passed


def _verify_covariance(cfg, exp, rows):
    run = run_member(exp, 0)
    problem = exp.window_problem(run.series.backgrounds[0], run.omegas[0])
    rep = lab.ensemble_covariance_check(
        problem, cfg["observations"]["sigma_r_true"],
        members=cfg["lab"]["members"], master_seed=cfg.master_seed,
    )
    rows.append(["covariance", "mc_band", "", rep.max_abs_diff,
                 float(rep.mc_band.max()), rep.within_band])
    return rep.passed


def _verify_errors(cfg, exp, rows, out):
    rep = lab.error_dissection(exp)
    corr_rows = [[r.pair, r.cycle, r.rho, r.ci_low, r.ci_high, r.expected, r.passed]
                 for r in rep.rows]
    write_csv(os.path.join(out, "correlations.csv"),
              ["pair", "k", "rho", "ci_low", "ci_high", "expected", "pass"], corr_rows)
    norms = rep.member0_ledger.norms()
    ledger_rows = []
    for k in range(norms.shape[0]):
        for i, comp in enumerate(("input", "discrepancy", "observation")):
            ledger_rows.append([k, comp, norms[k, i]])
    write_csv(os.path.join(out, "ledger.csv"), ["k", "component", "norm"], ledger_rows)
    g = rep.grid_correlations
    grows = [
        [k, exp.layout.compositions.names[c], i, j, g[k, c, i, j]]
        for k in range(g.shape[0]) for c in range(g.shape[1])
        for i in range(g.shape[2]) for j in range(g.shape[3])
        if not np.isnan(g[k, c, i, j])
    ]
    write_csv(os.path.join(out, "grid_correlations.csv"),
              ["k", "composition", "loc_i", "loc_j", "rho"], grows)
    cc = rep.composition_correlations
    crows = [
        [k, loc, exp.layout.compositions.names[a], exp.layout.compositions.names[b],
         cc[k, loc, a, b]]
        for k in range(cc.shape[0]) for loc in range(cc.shape[1])
        for a in range(cc.shape[2]) for b in range(cc.shape[3])
        if not np.isnan(cc[k, loc, a, b])
    ]
    write_csv(os.path.join(out, "composition_correlations.csv"),
              ["k", "location", "comp_i", "comp_j", "rho"], crows)
    for r in rep.rows:
        rows.append(["errors", r.pair, r.cycle,
                     "" if r.rho is None else r.rho, rep.threshold, r.passed])
    return rep.pattern_pass


def cmd_verify(cfg, suite="all", out_dir=None):
    """Run the selected property suites; exit 0 iff everything passes."""
    if suite not in VERIFY_SUITES:
        raise ConfigError(f"suite must be one of {VERIFY_SUITES}")
    exp = build_experiment(cfg)
    out = _prepare(cfg, out_dir)
    rows = []
    results = []
    if suite in ("affine", "all"):
        results.append(_verify_affine(cfg, exp, rows))
    if suite in ("shift", "all"):
        results.append(_verify_shift(exp, rows, out))
    if suite in ("neighborhood", "all"):
        results.append(_verify_neighborhood(exp, rows))
    if suite in ("covariance", "all"):
        results.append(_verify_covariance(cfg, exp, rows))
    if suite in ("errors", "all"):
        results.append(_verify_errors(cfg, exp, rows, out))
    write_csv(os.path.join(out, "verify.csv"),
              ["suite", "check", "index", "value", "threshold", "pass"], rows)
    return all(results)


def cmd_report(cfg, out_dir=None):
    """Summarize an output directory produced by earlier subcommands."""
    out = out_dir or cfg["output_dir"]
    lines = []
    meta_path = os.path.join(out, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        lines.append(f"config hash {meta['config_hash'][:12]}  seed {meta['master_seed']}  "
                     f"rng {meta['rng']}  version {meta['version']}")
    for name in ("truth.csv", "observations.csv", "analyses.csv", "moments.csv",
                 "verify.csv"):
        path = os.path.join(out, name)
        if os.path.exists(path):
            with open(path) as fh:
                count = sum(1 for _ in fh) - 1
            lines.append(f"{name}: {count} rows")
    j_path = os.path.join(out, "J_trace.csv")
    if os.path.exists(j_path):
        with open(j_path) as fh:
            rdr = csv.DictReader(fh)
            grads = [float(r["grad_norm"]) for r in rdr]
        if grads:
            lines.append(f"J_trace.csv: {len(grads)} cycles, max grad norm {max(grads):.3e}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="reanlab",
        description="Desk-scale variational reanalysis engine and stochasticity lab",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("truth", "simulate and dump the hidden truth"),
        ("observe", "sample and dump the observations"),
        ("assimilate", "run the assimilation cycle"),
        ("ensemble", "run the ensemble and dump moments"),
        ("verify", "run property suites"),
        ("report", "summarize an output directory"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        if name == "ensemble":
            p.add_argument("--members", type=int, default=None, help="member count override")
        if name == "verify":
            p.add_argument("--suite", default="all", choices=VERIFY_SUITES)
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        raw = dict(cfg.raw)
        raw["master_seed"] = args.seed
        from .config import validate_config

        cfg = validate_config(raw)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "truth":
            cmd_truth(cfg, args.out)
        elif args.command == "observe":
            cmd_observe(cfg, args.out)
        elif args.command == "assimilate":
            cmd_assimilate(cfg, args.out)
        elif args.command == "ensemble":
            cmd_ensemble(cfg, args.out, members=args.members)
        elif args.command == "verify":
            if not cmd_verify(cfg, suite=args.suite, out_dir=args.out):
                sys.stderr.write("verify: at least one property failed\n")
                return EXIT_PROPERTY_FAILURE
        elif args.command == "report":
            cmd_report(cfg, args.out)
    except (ConfigError, OSError) as exc:
        sys.stderr.write(f"config/io error: {exc}\n")
        return EXIT_CONFIG_ERROR
    except NumericError as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC_ERROR
    except ReanlabError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
