"""Run configuration: TOML schema, validation and problem construction."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .coeffexpr import parse_expr, sample_coefficients, sample_field
from .errors import ConfigError
from .geometry import build_disk_mesh, build_interval_mesh, build_regions
from .pdecore import ThetaIntegrator, TimeGrid
from .problem import ControlProblem, Follower

__all__ = ["RunConfig", "DEFAULTS", "load_config", "parse_config", "build_problem", "Setup"]

DEFAULTS = {
    "geometry": {"kind": "interval", "n": 32, "length": 1.0, "n_r": 8, "n_t": 16, "radius": 1.0},
    "time": {"T": 1.0, "M": 64, "theta": 1.0, "upwind": False},
    "coefficients": {},
    "regions": {},
    "followers": {
        "alpha1": 1.0,
        "alpha2": 1.0,
        "mu1": 10.0,
        "mu2": 10.0,
        "target1": "0",
        "target2": "0",
    },
    "leader": {"y0": "0", "yGamma0": None, "f": "0"},
    "nash": {"tol": 1e-10, "max_iter": 500, "method": "cg"},
    "hum": {
        "epsilon": 1e-3,
        "solver": "cg",
        "tol": 1e-9,
        "max_iter": None,
        "inner_tol": 1e-11,
        "sweep": [],
    },
    "carleman": {
        "lambda": 2.0,
        "s": 3.0,
        "samples": 200,
        "seed": 0,
        "time_samples": 200,
        "space_samples": 401,
        "scale_s": True,
    },
    "nonlinearity": {
        "F": "0",
        "G": "0",
        "LF": None,
        "LG": None,
        "dF_ds": None,
        "dF_dgx": None,
        "dF_dgy": None,
        "dG_ds": None,
        "dG_dgt": None,
        "tol": 1e-9,
        "max_iter": 50,
    },
    "output": {"directory": "out", "formats": ["csv", "json"]},
    "oracle": {"n": 8, "M": 8},
}

_FREE_SECTIONS = {"coefficients", "regions"}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with all defaults filled in."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **sections) -> "RunConfig":
        data = copy.deepcopy(self.data)
        for sec, vals in sections.items():
            data[sec].update(vals)
        return parse_config(data)


def _merge(user: dict) -> dict:
    if not isinstance(user, dict):
        raise ConfigError("configuration must be a table")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown configuration section(s): {sorted(unknown)}")
    out = copy.deepcopy(DEFAULTS)
    for sec, vals in user.items():
        if not isinstance(vals, dict):
            raise ConfigError(f"section [{sec}] must be a table")
        if sec not in _FREE_SECTIONS:
            bad = set(vals) - set(DEFAULTS[sec])
            if bad:
                raise ConfigError(f"unknown key(s) in [{sec}]: {sorted(bad)}")
        out[sec].update(copy.deepcopy(vals))
    return out


def _positive(value, name, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if not (value > 0 and np.isfinite(value)):
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return int(value) if integer else float(value)


def parse_config(user: dict) -> RunConfig:
    """Merge with defaults and validate scalar settings.

    Geometry-dependent checks (regions, expressions on the mesh) happen in
    :func:`build_problem`.
    """
    d = _merge(user)
    g = d["geometry"]
    if g["kind"] not in ("interval", "disk"):
        raise ConfigError(f"geometry.kind must be 'interval' or 'disk', got {g['kind']!r}")
    t = d["time"]
    _positive(t["T"], "time.T")
    _positive(t["M"], "time.M", integer=True)
    if t["theta"] not in (0.5, 1.0, 1):
        raise ConfigError(f"time.theta must be 0.5 or 1, got {t['theta']!r}")
    fol = d["followers"]
    for k in ("alpha1", "alpha2", "mu1", "mu2"):
        _positive(fol[k], f"followers.{k}")
    h = d["hum"]
    _positive(h["epsilon"], "hum.epsilon")
    _positive(h["tol"], "hum.tol")
    _positive(h["inner_tol"], "hum.inner_tol")
    if h["solver"] not in ("cg", "prox"):
        raise ConfigError(f"hum.solver must be 'cg' or 'prox', got {h['solver']!r}")
    if h["max_iter"] is not None:
        _positive(h["max_iter"], "hum.max_iter", integer=True)
    n = d["nash"]
    _positive(n["tol"], "nash.tol")
    _positive(n["max_iter"], "nash.max_iter", integer=True)
    if n["method"] not in ("cg", "cgnr"):
        raise ConfigError(f"nash.method must be 'cg' or 'cgnr', got {n['method']!r}")
    c = d["carleman"]
    _positive(c["lambda"], "carleman.lambda")
    _positive(c["s"], "carleman.s")
    if c["lambda"] < 1 or c["s"] < 1:
        raise ConfigError("carleman.lambda and carleman.s must be at least 1")
    if not isinstance(c["samples"], int) or c["samples"] < 0:
        raise ConfigError("carleman.samples must be a nonnegative integer")
    if not isinstance(c["seed"], int) or c["seed"] < 0:
        raise ConfigError("carleman.seed must be a nonnegative integer")
    nl = d["nonlinearity"]
    for k in ("LF", "LG"):
        v = nl[k]
        if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0):
            raise ConfigError(f"nonlinearity.{k} must be a nonnegative number")
    for k in ("time_samples", "space_samples"):
        if not isinstance(c[k], int) or c[k] < 3:
            raise ConfigError(f"carleman.{k} must be an integer >= 3")
    if not isinstance(c["scale_s"], bool):
        raise ConfigError("carleman.scale_s must be true or false")
    sweep = h["sweep"]
    if not isinstance(sweep, list) or any(
        isinstance(e, bool) or not isinstance(e, (int, float)) or not e > 0 for e in sweep
    ):
        raise ConfigError("hum.sweep must be a list of positive numbers")
    h["sweep"] = [float(e) for e in sweep]
    out = d["output"]
    if not isinstance(out["formats"], list) or not set(out["formats"]) <= {"csv", "json"}:
        raise ConfigError("output.formats must be a list drawn from 'csv' and 'json'")
    o = d["oracle"]
    _positive(o["n"], "oracle.n", integer=True)
    _positive(o["M"], "oracle.M", integer=True)
    for sec in ("coefficients",):
        for k, v in d[sec].items():
            if not isinstance(v, (str, int, float)) or isinstance(v, bool):
                raise ConfigError(f"{sec}.{k} must be an expression string")
            d[sec][k] = str(v)
    for k in ("target1", "target2"):
        fol[k] = str(fol[k])
    for k in ("y0", "f"):
        d["leader"][k] = str(d["leader"][k])
    return RunConfig(d)


def load_config(path) -> RunConfig:
    """Read and validate a TOML configuration file."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed configuration {path}: {exc}") from exc
    return parse_config(raw)


@dataclass(frozen=True, eq=False)
class Setup:
    """Objects built from a configuration."""

    config: RunConfig
    mesh: object
    timegrid: TimeGrid
    coeffs: object
    regions: object
    problem: ControlProblem
    f: np.ndarray


def build_mesh(cfg: RunConfig):
    g = cfg["geometry"]
    if g["kind"] == "interval":
        return build_interval_mesh(g["n"], g["length"])
    return build_disk_mesh(g["n_r"], g["n_t"], g["radius"])


def build_problem(cfg: RunConfig, mesh=None, timegrid=None) -> Setup:
    """Build mesh, grid, coefficient tables, regions and the control problem."""
    mesh = build_mesh(cfg) if mesh is None else mesh
    t = cfg["time"]
    tg = TimeGrid(t["T"], t["M"], float(t["theta"])) if timegrid is None else timegrid
    coeffs = sample_coefficients(cfg["coefficients"], mesh, tg)
    regions = build_regions(mesh, cfg["regions"])
    integ = ThetaIntegrator(mesh, coeffs, tg, bool(t["upwind"]))
    fol = cfg["followers"]
    times = tg.times
    followers = (
        Follower(fol["alpha1"], fol["mu1"], sample_field(fol["target1"], mesh, times)),
        Follower(fol["alpha2"], fol["mu2"], sample_field(fol["target2"], mesh, times)),
    )
    lead = cfg["leader"]
    y0 = sample_field(parse_expr(lead["y0"], {"x", "y", "r", "th"}), mesh, [0.0], "bulk")[0]
    g_expr = lead["y0"] if lead["yGamma0"] is None else str(lead["yGamma0"])
    yg = sample_field(parse_expr(g_expr, {"x", "y", "r", "th"}), mesh, [0.0], "boundary")[0]
    f = sample_field(lead["f"], mesh, times)
    inner = cfg["hum"]["inner_tol"]
    problem = ControlProblem(integ, regions, followers, mesh.stack(y0, yg), picard_tol=inner)
    return Setup(cfg, mesh, tg, coeffs, regions, problem, f)
