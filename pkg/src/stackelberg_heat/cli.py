"""Command-line interface: ``stackelberg-heat SUBCOMMAND --config FILE``.

Every subcommand writes its CSV/JSON artifacts (each carrying the config
hash) and a ``run_report.json`` with timings, warnings and a checksum
manifest of the artifacts.  Artifacts are deterministic; timings live only
in the run report.

Exit codes: 0 success (warnings listed in the report), 1 failed oracle or
other numerical failure, 2 configuration error, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .carleman import (
    CarlemanWeights,
    build_morse,
    default_sample_grid,
    weight_bounds_check,
    observability_sample,
)
from .config import build_problem, load_config
from .errors import ConfigError, ContractViolation, NoConvergence, RhoWeightInfinite, StackelbergError
from .hum import cost_bound_report, hum_cg, hum_prox, verify_optimality_system
from .io import sha256_file, write_csv, write_json
from .nash import characterization_residual, eval_Ji, nash_solve, state
from .oracles import run_oracles
from .semilinear import (
    Nonlinearity,
    lipschitz_probe,
    quasi_nash_solve,
    semilinear_forward,
    semilinear_null_control,
    trajectory_box,
)

__all__ = ["main", "run", "SUBCOMMANDS"]

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NOCONV = 0, 1, 2, 3
REPORT_NAME = "run_report.json"


class _Capture(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())


@contextmanager
def _captured_warnings():
    handler = _Capture()
    pkg_logger = logging.getLogger("stackelberg_heat")
    pkg_logger.addHandler(handler)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            yield handler.messages
        finally:
            pkg_logger.removeHandler(handler)
            handler.messages.extend(str(w.message) for w in caught)


class _Run:
    """Artifact writer bound to one output directory and config hash."""

    def __init__(self, cfg, out: Path):
        self.cfg = cfg
        self.out = out
        self.files = []
        self.timings = {}
        self.formats = set(cfg["output"]["formats"])

    @contextmanager
    def timed(self, name):
        t0 = time.perf_counter()
        yield
        self.timings[name] = time.perf_counter() - t0

    def csv(self, name, header, rows):
        if "csv" in self.formats:
            write_csv(self.out / name, header, rows, self.cfg.hash)
            self.files.append(name)

    def json(self, name, obj):
        if "json" in self.formats:
            write_json(self.out / name, {"config_hash": self.cfg.hash, **obj})
            self.files.append(name)


def _control_rows(problem, *fields):
    times = problem.timegrid.times
    for k in range(fields[0].shape[0]):
        for i in range(fields[0].shape[1]):
            yield (k, times[k], i) + tuple(fl[k, i] for fl in fields)


def _weights(setup, cfg):
    c = cfg["carleman"]
    morse = build_morse(setup.mesh, setup.regions.omega_prime)
    return CarlemanWeights(morse, float(c["lambda"]), float(c["s"]), setup.timegrid.T, c["scale_s"])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _simulate(run, setup, args):
    p = setup.problem
    with run.timed("forward_solve"):
        traj = state(p, setup.f)
    run.csv("trajectory.csv", ["level", "time", "node", "kind", "value"], traj.csv_rows())
    w = p.mesh.weights
    res = {
        "initial_norm": p.state_norm(traj.initial),
        "terminal_norm": p.state_norm(traj.final),
        "initial_mass": float(np.dot(w, traj.initial)),
        "terminal_mass": float(np.dot(w, traj.final)),
        "coefficients": p.coeffs.report,
    }
    run.json("simulate.json", res)
    return res


def _nash(run, setup, args):
    p, cfg = setup.problem, setup.config["nash"]
    with run.timed("nash_solve"):
        sol = nash_solve(p, setup.f, cfg["tol"], cfg["max_iter"], cfg["method"])
    char = characterization_residual(p, sol)
    run.csv("nash_controls.csv", ["level", "time", "node", "v1", "v2"],
            _control_rows(p, sol.v1, sol.v2))
    res = {
        "iterations": sol.iterations,
        "residual": sol.residual,
        "characterization_residual": list(char),
        "J1": eval_Ji(p, 1, setup.f, sol.v1, sol.v2),
        "J2": eval_Ji(p, 2, setup.f, sol.v1, sol.v2),
        "thresholds": sol.thresholds.to_dict() if sol.thresholds else None,
        "method": cfg["method"],
    }
    run.json("nash.json", res)
    return res


def _hum_once(p, cfg, eps):
    if cfg["solver"] == "cg":
        return hum_cg(p, eps=eps, tol=cfg["tol"], max_iter=cfg["max_iter"] or 500,
                      inner_tol=cfg["inner_tol"])
    return hum_prox(p, eps=eps, tol=cfg["tol"], max_iter=cfg["max_iter"] or 100_000,
                    inner_tol=cfg["inner_tol"])


def _hum(run, setup, args):
    p, cfg = setup.problem, setup.config["hum"]
    eps = cfg["epsilon"]
    with run.timed("hum"):
        result = _hum_once(p, cfg, eps)
    run.csv("hum_control.csv", ["level", "time", "node", "f"], _control_rows(p, result.f))
    run.csv("hum_terminal_state.csv", ["node", "kind", "value"],
            ((i if i < p.mesh.n_bulk else i - p.mesh.n_bulk,
              "bulk" if i < p.mesh.n_bulk else "boundary", v)
             for i, v in enumerate(result.Y.final)))
    nb = p.mesh.n_bulk
    run.csv("hum_terminal_adjoint.csv", ["node", "kind", "value"],
            ((i if i < nb else i - nb, "bulk" if i < nb else "boundary", v)
             for i, v in enumerate(result.Z_T)))
    res = {"result": result.to_dict(), "extras": {k: v for k, v in result.extras.items()
                                                  if isinstance(v, (int, float, bool, str))}}
    with run.timed("optimality_check"):
        res["optimality_check"] = verify_optimality_system(p, result)
    try:
        w = _weights(setup, setup.config)
        res["cost_bound"] = cost_bound_report(p, result, w.log_rho(p.timegrid.times))
    except RhoWeightInfinite as exc:
        logging.getLogger("stackelberg_heat").warning("cost bound skipped: %s", exc)
        res["cost_bound"] = None
    if cfg["sweep"]:
        rows = []
        with run.timed("epsilon_sweep"):
            for e in cfg["sweep"]:
                r = _hum_once(p, cfg, e)
                rows.append((e, r.terminal_norm, r.control_norm, r.iterations))
        run.csv("hum_sweep.csv", ["epsilon", "terminal_norm", "control_norm", "iterations"], rows)
        eps_arr = np.array([r[0] for r in rows])
        tn = np.array([r[1] for r in rows])
        order = np.argsort(-eps_arr)
        tn_sorted = tn[order]
        res["sweep"] = {
            "monotone": bool(np.all(np.diff(tn_sorted) <= 1e-14 * tn_sorted[:-1])),
            "slope": float(np.polyfit(np.log(eps_arr), np.log(tn), 1)[0]) if len(rows) > 1 and np.all(tn > 0) else None,
        }
    run.json("hum.json", res)
    return res


def _observability(run, setup, args):
    cfg = setup.config["carleman"]
    w = _weights(setup, setup.config)
    with run.timed("observability_sample"):
        stats = observability_sample(setup.problem, w, cfg["samples"], cfg["seed"], args.threads)
    run.csv("observability_quotients.csv", ["sample", "quotient", "carleman_quotient"], stats.csv_rows())
    grid = default_sample_grid(w, cfg["time_samples"], cfg["space_samples"])
    with run.timed("weight_bounds_check"):
        bounds = weight_bounds_check(w, grid)
    res = {"statistics": stats.summary(), "weights": w.to_dict(), "weight_bounds": bounds}
    run.json("observability.json", res)
    return res


def _weights_cmd(run, setup, args):
    cfg = setup.config["carleman"]
    w = _weights(setup, setup.config)
    mesh, tg = setup.mesh, setup.timegrid
    times = tg.times[1:-1]
    eta_b = w.morse.bulk_values
    log_rho = w.log_rho(times)

    def rows():
        for t, lr in zip(times, log_rho):
            for kind, eta in (("bulk", eta_b), ("boundary", w.morse.boundary_values)):
                xi, al = w.xi(eta, t), w.alpha(eta, t)
                xb, ab = w.xibar(eta, t), w.alphabar(eta, t)
                for i in range(len(eta)):
                    yield (t, i, kind, eta[i], xi[i], al[i], xb[i], ab[i], lr)

    run.csv("weights.csv", ["time", "node", "kind", "eta", "xi", "alpha", "xibar", "alphabar", "log_rho"], rows())
    grid = default_sample_grid(w, cfg["time_samples"], cfg["space_samples"])
    res = {"weights": w.to_dict(), "weight_bounds": weight_bounds_check(w, grid),
           "weight_bounds_fd": weight_bounds_check(w, grid, method="fd")}
    run.json("weights.json", res)
    return res


def _oracle(run, setup, args):
    cfg = setup.config
    o = cfg["oracle"]
    geom = {"n": o["n"]} if cfg["geometry"]["kind"] == "interval" else {"n_r": 3, "n_t": 8}
    small = build_problem(cfg.with_overrides(geometry=geom, time={"M": o["M"]}))
    with run.timed("oracle_suite"):
        res = run_oracles(small.problem, small.f, seed=cfg["carleman"]["seed"])
    run.json("oracle.json", res)
    if not res["passed"]:
        run.exit_code = EXIT_FAILURE
    return res


def _semilinear(run, setup, args):
    cfg = setup.config
    nlc = cfg["nonlinearity"]
    nl = Nonlinearity.from_config(nlc)
    p = setup.problem
    with run.timed("semilinear_forward"):
        fw = semilinear_forward(p, nl, sources=p.regions.omega.apply(setup.f))
    with run.timed("quasi_nash"):
        qn = quasi_nash_solve(p, nl, setup.f, tol=nlc["tol"], max_iter=nlc["max_iter"])
    h = cfg["hum"]
    with run.timed("semilinear_null_control"):
        hr = semilinear_null_control(p, nl, h["epsilon"], tol=nlc["tol"], max_iter=nlc["max_iter"],
                                     hum_tol=h["tol"], hum_max_iter=h["max_iter"],
                                     inner_tol=h["inner_tol"], solver=h["solver"])
    probe = lipschitz_probe(nl, trajectory_box(p.mesh, np.vstack([fw.values, hr.Y.values])))
    for label in ("F", "G"):
        if not probe[label]["ok"]:
            logging.getLogger("stackelberg_heat").warning(
                "sampled difference quotient of %s exceeds the declared Lipschitz constant", label)
    run.csv("semilinear_controls.csv", ["level", "time", "node", "f", "v1", "v2"],
            _control_rows(p, hr.f, hr.extras["quasi_nash"].v1 if hr.extras["quasi_nash"] else qn.v1,
                          hr.extras["quasi_nash"].v2 if hr.extras["quasi_nash"] else qn.v2))
    res = {
        "nonlinearity": nl.to_dict(),
        "forward_picard_max": int(fw.picard_iterations.max()) if len(fw.picard_iterations) else 0,
        "quasi_nash": {"outer_iterations": qn.outer_iterations, "outer_history": qn.outer_history,
                       "monotone": qn.monotone, "nash_residual": qn.residual},
        "null_control": {**hr.to_dict(), "outer_iterations": hr.extras["outer_iterations"],
                         "outer_history": hr.extras["outer_history"],
                         "outer_monotone": hr.extras["outer_monotone"]},
        "lipschitz_probe": probe,
        "stopping_rule": "relative space-time change of the state trajectory",
    }
    run.json("semilinear.json", res)
    return res


SUBCOMMANDS = {
    "simulate": _simulate,
    "nash": _nash,
    "hum": _hum,
    "observability": _observability,
    "weights": _weights_cmd,
    "oracle": _oracle,
    "semilinear": _semilinear,
}


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def run(subcommand, config_path, out=None, seed=None, threads=1) -> int:
    """Run one subcommand; returns the process exit code."""
    if subcommand not in SUBCOMMANDS:
        print(f"error: unknown subcommand {subcommand!r}", file=sys.stderr)
        return EXIT_CONFIG
    t_start = time.perf_counter()
    out_dir = None
    try:
        cfg = load_config(config_path)
        if seed is not None:
            if seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg = cfg.with_overrides(carleman={"seed": int(seed)})
        out_dir = Path(out if out is not None else cfg["output"]["directory"])
        out_dir.mkdir(parents=True, exist_ok=True)
        runner = _Run(cfg, out_dir)
        runner.exit_code = EXIT_OK
        args = argparse.Namespace(threads=max(1, int(threads or 1)))
        with _captured_warnings() as msgs:
            with runner.timed("setup"):
                setup = build_problem(cfg)
            results = SUBCOMMANDS[subcommand](runner, setup, args)
        runner.json("config.json", {"config": cfg.data})
    except (ConfigError, ContractViolation) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoConvergence as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        _failure_report(out_dir, subcommand, exc, EXIT_NOCONV)
        return EXIT_NOCONV
    except StackelbergError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _failure_report(out_dir, subcommand, exc, EXIT_FAILURE)
        return EXIT_FAILURE

    manifest = {name: sha256_file(out_dir / name) for name in sorted(set(runner.files))}
    report = {
        "config_hash": cfg.hash,
        "subcommand": subcommand,
        "version": __version__,
        "exit_code": runner.exit_code,
        "timings": {**runner.timings, "total": time.perf_counter() - t_start},
        "warnings": list(dict.fromkeys(msgs)),
        "summary": _summary(results),
        "manifest": manifest,
    }
    write_json(out_dir / REPORT_NAME, report)
    for m in report["warnings"]:
        print(f"warning: {m}", file=sys.stderr)
    return runner.exit_code


def _summary(results):
    keep = {}
    for k, v in results.items():
        if isinstance(v, (int, float, bool, str)) or v is None:
            keep[k] = v
        elif isinstance(v, dict):
            keep[k] = {kk: vv for kk, vv in v.items() if isinstance(vv, (int, float, bool, str))}
    return keep


def _failure_report(out_dir, subcommand, exc, code):
    if out_dir is None:
        return
    report = {"subcommand": subcommand, "exit_code": code, "error": str(exc),
              "error_type": type(exc).__name__, "version": __version__}
    for attr in ("iterations", "residual", "step"):
        if hasattr(exc, attr):
            report[attr] = getattr(exc, attr)
    write_json(Path(out_dir) / REPORT_NAME, report)


def _sweep_one(job):
    sub, cfg_path, out, seed = job
    return run(sub, cfg_path, out, seed, 1)


def sweep(subcommand, configs, out, seed=None, threads=1) -> int:
    """Run one subcommand over several configs in worker processes.

    Each config writes to ``out/<config stem>``; returns the largest exit code.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stems = [Path(c).stem for c in configs]
    if len(set(stems)) != len(stems):
        print("error: sweep configs must have distinct file names", file=sys.stderr)
        return EXIT_CONFIG
    jobs = [(subcommand, c, str(out / s), seed) for c, s in zip(configs, stems)]
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=int(threads)) as pool:
            codes = list(pool.map(_sweep_one, jobs))
    else:
        codes = [_sweep_one(j) for j in jobs]
    write_json(out / "sweep_summary.json", {
        "subcommand": subcommand,
        "runs": {s: code for s, code in zip(stems, codes)},
    })
    return max(codes) if codes else EXIT_OK


def _parser():
    parser = argparse.ArgumentParser(
        prog="stackelberg-heat",
        description="Stackelberg-Nash null control of heat equations with dynamic boundary conditions.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, multi=False):
        if multi:
            p.add_argument("--config", required=True, nargs="+", metavar="PATH")
        else:
            p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--out", metavar="DIR", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")

    helps = {
        "simulate": "forward solve with the configured leader control",
        "nash": "follower Nash equilibrium for the configured leader control",
        "hum": "leader control by penalized HUM",
        "observability": "Monte-Carlo observability quotients and weight bounds",
        "weights": "tables of the Carleman weights",
        "oracle": "dense brute-force cross-checks on a tiny grid",
        "semilinear": "quasi-Nash equilibrium and null control for the semilinear system",
    }
    for name, text in helps.items():
        common(sub.add_parser(name, help=text))
    sp = sub.add_parser("sweep", help="run one subcommand over several configs in parallel")
    sp.add_argument("subcommand", choices=sorted(SUBCOMMANDS))
    common(sp, multi=True)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep":
        out = args.out if args.out is not None else "sweep_out"
        return sweep(args.subcommand, args.config, out, args.seed, args.threads)
    return run(args.command, args.config, args.out, args.seed, args.threads)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
