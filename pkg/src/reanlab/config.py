"""Run configuration: JSON schema, validation and normalization.

Every run is described by one JSON document with the blocks grid, dynamics,
observations, covariances, cycle, world and lab plus master_seed and
output_dir.  Validation rejects unknown keys and fills documented defaults
before any computation happens; the normalized dict is hashed into the run
metadata so outputs are reproducible byte for byte.
"""

import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError

_PLACEMENTS = ("centroid", "uniform_random", "fixed")
_KINDS = ("linear_advection_diffusion", "quadratic_perturbed")


def _require(block, key, types, where):
    value = block[key]
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{where}.{key} must not be a boolean")
    if not isinstance(value, types):
        names = "/".join(t.__name__ for t in types)
        raise ConfigError(f"{where}.{key} must be {names}, got {type(value).__name__}")
    return value


def _check_keys(block, allowed, where):
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _number(block, key, where, minimum=None, exclusive=False):
    v = float(_require(block, key, (int, float), where))
    if minimum is not None:
        if exclusive and not v > minimum:
            raise ConfigError(f"{where}.{key} must be > {minimum}")
        if not exclusive and v < minimum:
            raise ConfigError(f"{where}.{key} must be >= {minimum}")
    return v


def _integer(block, key, where, minimum=None):
    v = _require(block, key, (int,), where)
    if minimum is not None and v < minimum:
        raise ConfigError(f"{where}.{key} must be >= {minimum}")
    return int(v)


DEFAULTS = {
    "master_seed": 0,
    "output_dir": "out",
    "grid": {"dim": 1, "n_cells": 8, "spacing": 1.0, "compositions": ["PM25"]},
    "dynamics": {
        "kind": "linear_advection_diffusion",
        "advection": 0.0,
        "diffusion": 0.0,
        "quadratic_gain": 0.0,
        "dt": 1.0,
    },
    "observations": {
        "times": None,            # default: every offset 0..q-1
        "count": 1,
        "placement": "centroid",
        "locations": None,        # required for placement == "fixed"
        "compositions": None,     # per-station composition index, default round robin
        "sigma_r_true": None,     # default: covariances.sigma_r
    },
    "covariances": {"sigma_b": 1.0, "length_b": None, "sigma_r": 0.5},
    "cycle": {"window_steps": 1, "n_cycles": 1, "initial_guess": "zeros"},
    "world": {
        "kind": None,             # default: mirror the dynamics block (perfect model)
        "advection": None,
        "diffusion": None,
        "quadratic_gain": None,
        "sigma_w": 0.0,
        "length_s": None,
        "initial": "draw",
        "initial_sigma": 1.0,
        "vary_truth": False,
    },
    "lab": {
        "members": 200,
        "track_covariance": False,
        "significance_factor": 3.0,
        "bootstrap_samples": 500,
        "affine_trials": 5,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully defaulted run description."""

    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def master_seed(self):
        return self.raw["master_seed"]

    def canonical_json(self):
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _merged(user, defaults, where):
    _check_keys(user, defaults, where)
    out = dict(defaults)
    out.update(user)
    return out


def validate_config(doc):
    """Validate a raw config dict and return the normalized RunConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(doc, DEFAULTS, "config")
    cfg = {}

    seed = doc.get("master_seed", DEFAULTS["master_seed"])
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("master_seed must be an integer in [0, 2^64)")
    cfg["master_seed"] = seed
    out_dir = doc.get("output_dir", DEFAULTS["output_dir"])
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("output_dir must be a non-empty string")
    cfg["output_dir"] = out_dir

    g = _merged(doc.get("grid", {}), DEFAULTS["grid"], "grid")
    dim = _integer(g, "dim", "grid")
    if dim not in (1, 2):
        raise ConfigError("grid.dim must be 1 or 2")
    n_cells = g["n_cells"]
    if dim == 1:
        if not isinstance(n_cells, int) or n_cells < 2:
            raise ConfigError("grid.n_cells must be an integer >= 2 for dim 1")
    else:
        if (not isinstance(n_cells, list) or len(n_cells) != 2
                or not all(isinstance(v, int) and v >= 1 for v in n_cells)
                or n_cells[0] * n_cells[1] < 2):
            raise ConfigError("grid.n_cells must be [n0, n1] with n0*n1 >= 2 for dim 2")
    _number(g, "spacing", "grid", minimum=0.0, exclusive=True)
    comps = g["compositions"]
    if (not isinstance(comps, list) or not comps
            or not all(isinstance(c, str) for c in comps)
            or len(set(comps)) != len(comps)):
        raise ConfigError("grid.compositions must be a list of distinct names")
    cfg["grid"] = g

    d = _merged(doc.get("dynamics", {}), DEFAULTS["dynamics"], "dynamics")
    if d["kind"] not in _KINDS:
        raise ConfigError(f"dynamics.kind must be one of {_KINDS}")
    _number(d, "advection", "dynamics")
    _number(d, "diffusion", "dynamics", minimum=0.0)
    _number(d, "quadratic_gain", "dynamics")
    _number(d, "dt", "dynamics", minimum=0.0, exclusive=True)
    cfg["dynamics"] = d

    c = _merged(doc.get("cycle", {}), DEFAULTS["cycle"], "cycle")
    q = _integer(c, "window_steps", "cycle", minimum=1)
    _integer(c, "n_cycles", "cycle", minimum=1)
    guess = c["initial_guess"]
    if isinstance(guess, str):
        if guess not in ("zeros", "truth"):
            raise ConfigError("cycle.initial_guess must be zeros, truth, "
                              "{'perturbed_truth': sigma} or a value list")
    elif isinstance(guess, dict):
        _check_keys(guess, ("perturbed_truth",), "cycle.initial_guess")
        if "perturbed_truth" not in guess:
            raise ConfigError("cycle.initial_guess object needs perturbed_truth")
        if not isinstance(guess["perturbed_truth"], (int, float)) or guess["perturbed_truth"] < 0:
            raise ConfigError("perturbed_truth sigma must be a number >= 0")
    elif not (isinstance(guess, list) and all(isinstance(v, (int, float)) for v in guess)):
        raise ConfigError("cycle.initial_guess must be zeros, truth, "
                          "{'perturbed_truth': sigma} or a value list")
    cfg["cycle"] = c

    o = _merged(doc.get("observations", {}), DEFAULTS["observations"], "observations")
    times = o["times"]
    if times is None:
        o["times"] = list(range(q))
    else:
        if (not isinstance(times, list) or not times
                or not all(isinstance(t, int) and 0 <= t <= q for t in times)
                or len(set(times)) != len(times)):
            raise ConfigError(f"observations.times must be distinct integers in [0, {q}]")
        o["times"] = sorted(times)
    _integer(o, "count", "observations", minimum=1)
    if o["placement"] not in _PLACEMENTS:
        raise ConfigError(f"observations.placement must be one of {_PLACEMENTS}")
    if o["placement"] == "fixed":
        if not isinstance(o["locations"], list) or len(o["locations"]) != o["count"]:
            raise ConfigError("fixed placement needs observations.locations with "
                              "`count` coordinates")
    station_comps = o["compositions"]
    p = len(comps)
    if station_comps is None:
        o["compositions"] = [i % p for i in range(o["count"])]
    elif station_comps == "all":
        pass
    elif (isinstance(station_comps, list)
          and len(station_comps) == o["count"]
          and all(isinstance(v, int) and 0 <= v < p for v in station_comps)):
        pass
    else:
        raise ConfigError("observations.compositions must be null, 'all' or a list of "
                          "composition indices, one per station")
    if o["sigma_r_true"] is not None:
        _number(o, "sigma_r_true", "observations", minimum=0.0)
    cfg["observations"] = o

    v = _merged(doc.get("covariances", {}), DEFAULTS["covariances"], "covariances")
    _number(v, "sigma_b", "covariances", minimum=0.0, exclusive=True)
    if v["length_b"] is not None:
        _number(v, "length_b", "covariances", minimum=0.0, exclusive=True)
    _number(v, "sigma_r", "covariances", minimum=0.0, exclusive=True)
    cfg["covariances"] = v
    if cfg["observations"]["sigma_r_true"] is None:
        cfg["observations"]["sigma_r_true"] = v["sigma_r"]

    w = _merged(doc.get("world", {}), DEFAULTS["world"], "world")
    for key, src in (("kind", "kind"), ("advection", "advection"),
                     ("diffusion", "diffusion"), ("quadratic_gain", "quadratic_gain")):
        if w[key] is None:
            w[key] = d[src]
    if w["kind"] not in _KINDS:
        raise ConfigError(f"world.kind must be one of {_KINDS}")
    _number(w, "advection", "world")
    _number(w, "diffusion", "world", minimum=0.0)
    _number(w, "quadratic_gain", "world")
    _number(w, "sigma_w", "world", minimum=0.0)
    if w["length_s"] is not None:
        _number(w, "length_s", "world", minimum=0.0, exclusive=True)
    initial = w["initial"]
    if isinstance(initial, str):
        if initial not in ("draw", "zeros"):
            raise ConfigError("world.initial must be 'draw', 'zeros' or a value list")
    elif not (isinstance(initial, list) and all(isinstance(x, (int, float)) for x in initial)):
        raise ConfigError("world.initial must be 'draw', 'zeros' or a value list")
    _number(w, "initial_sigma", "world", minimum=0.0)
    if not isinstance(w["vary_truth"], bool):
        raise ConfigError("world.vary_truth must be a boolean")
    cfg["world"] = w

    lab = _merged(doc.get("lab", {}), DEFAULTS["lab"], "lab")
    _integer(lab, "members", "lab", minimum=2)
    if not isinstance(lab["track_covariance"], bool):
        raise ConfigError("lab.track_covariance must be a boolean")
    _number(lab, "significance_factor", "lab", minimum=0.0, exclusive=True)
    _integer(lab, "bootstrap_samples", "lab", minimum=1)
    _integer(lab, "affine_trials", "lab", minimum=3)
    cfg["lab"] = lab

    return RunConfig(cfg)


def load_config(path):
    """Read and validate a JSON run configuration."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return validate_config(doc)
