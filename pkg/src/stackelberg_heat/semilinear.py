"""Semilinear state equations and fixed-point reductions to linear solves.

The state equation gains the nonlinear terms ``F(y, grad y)`` in the bulk
and ``G(y_G, grad_G y_G)`` on the boundary::

    y'   = (linear generator) y - F(y, grad y)       + sources
    y_G' = (linear generator) y_G - G(y_G, grad_G y_G)

Linearizing about a trajectory ``ybar`` gives frozen coefficients
``a + dF/ds``, ``B + dF/dzeta`` (and boundary analogues) plus the affine
remainder ``F(ybar) - dF/ds ybar - dF/dzeta . grad ybar``, which the linear
machinery absorbs as a known source.  At a fixed point of the outer loop the
linearized state coincides with the semilinear one, so the linear Nash
characterization and HUM synthesis transfer to the semilinear system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeffexpr import Num, derivative, parse_expr
from .errors import ConfigError, OuterNoConvergence, PerStepNoConvergence
from .geometry import gradient_matrices, tangential_gradient_matrix
from .hum import HumResult, hum_cg, hum_prox
from .nash import NashSolution, _Ji_parts, nash_solve
from .pdecore import Trajectory

__all__ = [
    "Nonlinearity",
    "SemilinearTrajectory",
    "QuasiNashSolution",
    "semilinear_forward",
    "linearize",
    "quasi_nash_solve",
    "semilinear_null_control",
    "lipschitz_probe",
    "PRESETS",
]

logger = logging.getLogger(__name__)

F_IDENTS = {"s", "gx", "gy"}
G_IDENTS = {"s", "gt"}

PRESETS = {
    "tanh": ("{c}*tanh(s)", "{c}*tanh(s)"),
    "sin": ("{c}*sin(s)", "{c}*sin(s)"),
}


def _parse(text, allowed):
    return parse_expr(str(text), allowed=allowed)


def _eval(e, n, **env):
    val = e.evaluate(env)
    return np.broadcast_to(np.asarray(val, dtype=float), (n,)).copy()


@dataclass(frozen=True, eq=False)
class Nonlinearity:
    """Bulk and boundary nonlinear terms with their partial derivatives.

    Parameters
    ----------
    F : str
        Expression in ``s`` (state) and ``gx``, ``gy`` (gradient components).
    G : str
        Expression in ``s`` (boundary state) and ``gt`` (tangential derivative).
    LF, LG : float or None
        Declared Lipschitz constants; ``None`` means undeclared.
    derivatives : dict, optional
        Expressions overriding the symbolic derivatives, keyed by
        ``dF_ds``, ``dF_dgx``, ``dF_dgy``, ``dG_ds``, ``dG_dgt``.

    Raises
    ------
    ConfigError
        If ``F(0) != 0`` or ``G(0) != 0`` or an expression cannot be
        differentiated.
    """

    F: str = "0"
    G: str = "0"
    LF: float | None = None
    LG: float | None = None
    derivatives: dict = field(default_factory=dict)

    def __post_init__(self):
        fe = _parse(self.F, F_IDENTS)
        ge = _parse(self.G, G_IDENTS)
        object.__setattr__(self, "_F", fe)
        object.__setattr__(self, "_G", ge)
        d = {}
        given = {k: v for k, v in (self.derivatives or {}).items() if v is not None}
        for key, expr, var, allowed in (
            ("dF_ds", fe, "s", F_IDENTS),
            ("dF_dgx", fe, "gx", F_IDENTS),
            ("dF_dgy", fe, "gy", F_IDENTS),
            ("dG_ds", ge, "s", G_IDENTS),
            ("dG_dgt", ge, "gt", G_IDENTS),
        ):
            d[key] = _parse(given[key], allowed) if key in given else derivative(expr, var)
        object.__setattr__(self, "_d", d)
        zero = {"s": 0.0, "gx": 0.0, "gy": 0.0}
        f0 = float(fe.evaluate(zero))
        g0 = float(ge.evaluate({"s": 0.0, "gt": 0.0}))
        if f0 != 0.0 or g0 != 0.0:
            raise ConfigError(f"nonlinear terms must vanish at zero, got F(0)={f0}, G(0)={g0}")
        for name, L in (("LF", self.LF), ("LG", self.LG)):
            if L is not None and not L >= 0:
                raise ConfigError(f"Lipschitz constant {name} must be nonnegative")

    @classmethod
    def preset(cls, name: str, scale: float) -> "Nonlinearity":
        """Scaled ``tanh`` or ``sin`` in both bulk and boundary (Lipschitz ``scale``)."""
        if name not in PRESETS:
            raise ConfigError(f"unknown nonlinearity preset {name!r}")
        f, g = PRESETS[name]
        return cls(f.format(c=repr(float(scale))), g.format(c=repr(float(scale))), scale, scale)

    @classmethod
    def from_config(cls, section: dict) -> "Nonlinearity":
        ders = {k: section.get(k) for k in ("dF_ds", "dF_dgx", "dF_dgy", "dG_ds", "dG_dgt")}
        LF = section.get("LF")
        LG = section.get("LG")
        return cls(str(section.get("F", "0")), str(section.get("G", "0")),
                   None if LF in (None, 0, 0.0) else float(LF),
                   None if LG in (None, 0, 0.0) else float(LG), ders)

    @property
    def is_zero(self) -> bool:
        return isinstance(self._F, Num) and isinstance(self._G, Num)

    # nodal evaluation ------------------------------------------------------

    def _bulk_env(self, y, grads):
        env = {"s": y, "gx": grads[0]}
        env["gy"] = grads[1] if len(grads) > 1 else np.zeros_like(y)
        return env

    def bulk(self, y, grads):
        return _eval(self._F, len(y), **self._bulk_env(y, grads))

    def boundary(self, yg, tang):
        return _eval(self._G, len(yg), s=yg, gt=tang)

    def bulk_derivatives(self, y, grads):
        env = self._bulk_env(y, grads)
        n = len(y)
        dzeta = [_eval(self._d["dF_dgx"], n, **env)]
        if len(grads) > 1:
            dzeta.append(_eval(self._d["dF_dgy"], n, **env))
        return _eval(self._d["dF_ds"], n, **env), np.column_stack(dzeta)

    def boundary_derivatives(self, yg, tang):
        n = len(yg)
        return _eval(self._d["dG_ds"], n, s=yg, gt=tang), _eval(self._d["dG_dgt"], n, s=yg, gt=tang)

    def to_dict(self) -> dict:
        return {
            "F": self.F,
            "G": self.G,
            "LF": self.LF,
            "LG": self.LG,
            "derivatives": {k: v.to_text() for k, v in self._d.items()},
        }


class _Operators:
    """Gradient stencils shared by evaluation and linearization."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.grads = gradient_matrices(mesh)
        self.tgrad = tangential_gradient_matrix(mesh)

    def apply(self, nl: Nonlinearity, Y):
        """Stacked nonlinear term ``(F(y, grad y), G(y_G, grad_G y_G))``."""
        yb, yg = self.mesh.split(Y)
        grads = [G @ yb for G in self.grads]
        return np.concatenate([nl.bulk(yb, grads), nl.boundary(yg, self.tgrad @ yg)])


# ---------------------------------------------------------------------------
# Lipschitz probe
# ---------------------------------------------------------------------------


def lipschitz_probe(nl: Nonlinearity, box: dict, n_pairs=10_000, seed=0) -> dict:
    """Largest sampled difference quotient of ``F`` and ``G``.

    Parameters
    ----------
    box : dict
        ``{"s": (lo, hi), "gx": (lo, hi), ...}`` ranges of the arguments.
    n_pairs : int
    seed : int

    Returns
    -------
    dict
        ``F`` and ``G`` maximal quotients ``|dF| / (|ds| + ||dzeta||)``, the
        declared constants and whether ``quotient <= 1.01 L`` holds.
    """
    rng = np.random.default_rng(seed)

    def draw(names):
        out = {}
        for k in names:
            lo, hi = box.get(k, (0.0, 0.0))
            out[k] = rng.uniform(lo, hi, size=n_pairs)
        return out

    out = {}
    for label, expr, names, L in (
        ("F", nl._F, ("s", "gx", "gy"), nl.LF),
        ("G", nl._G, ("s", "gt"), nl.LG),
    ):
        a, b = draw(names), draw(names)
        fa, fb = _eval(expr, n_pairs, **a), _eval(expr, n_pairs, **b)
        dist = np.abs(a["s"] - b["s"]) + np.sqrt(sum((a[k] - b[k]) ** 2 for k in names[1:]))
        ok = dist > 0
        q = float(np.max(np.abs(fa - fb)[ok] / dist[ok])) if ok.any() else 0.0
        out[label] = {
            "quotient": q,
            "declared": L,
            "ok": True if L is None else bool(q <= 1.01 * L),
        }
    return out


def trajectory_box(mesh, values, margin=0.1) -> dict:
    """Bounding box of states and gradients of a trajectory, widened by ``margin``."""
    ops = _Operators(mesh)
    yb, yg = mesh.split(values)

    def widen(arr):
        lo, hi = float(np.min(arr)), float(np.max(arr))
        pad = margin * max(hi - lo, abs(lo), abs(hi), 1e-12)
        return (lo - pad, hi + pad)

    box = {"s": widen(np.concatenate([yb.ravel(), yg.ravel()]))}
    names = ("gx", "gy")
    for name, G in zip(names, ops.grads):
        box[name] = widen(G @ yb.T)
    box["gt"] = widen(ops.tgrad @ yg.T) if mesh.n_boundary else (0.0, 0.0)
    return box


# ---------------------------------------------------------------------------
# Forward solve
# ---------------------------------------------------------------------------


@dataclass
class SemilinearTrajectory:
    """Semilinear state with per-step Picard iteration counts."""

    trajectory: Trajectory
    picard_iterations: np.ndarray

    @property
    def values(self):
        return self.trajectory.values


def _factor(matrix):
    return spla.splu(sp.csc_matrix(matrix))


def semilinear_forward(problem, nl: Nonlinearity, Y0=None, sources=None, tol=1e-12,
                       max_iter=50) -> SemilinearTrajectory:
    """Theta-scheme with implicit linear part and per-step Picard on ``F, G``.

    With ``Yhat = Y_k + dt S_k`` each step solves::

        (I - theta dt K_{k+1}) Y + theta dt N(Y)
            = (I + (1-theta) dt K_k) Yhat - (1-theta) dt N(Yhat)

    which reduces to the linear integrator when ``N`` is linear.

    Parameters
    ----------
    problem : ControlProblem
        Supplies mesh, time grid and linear coefficients.
    nl : Nonlinearity
    Y0 : ndarray, optional
        Stacked initial state (default ``problem.Y0``).
    sources : ndarray, optional
        ``(M+1, N)`` or ``(M+1, n_bulk)`` sources.
    tol : float
        Per-step relative change tolerance (max norm).

    Raises
    ------
    PerStepNoConvergence
        If a step's Picard iteration does not reach ``tol``.
    """
    integ, tg, mesh = problem.integrator, problem.timegrid, problem.mesh
    theta, dt, M = tg.theta, tg.dt, tg.M
    S = integ._source_array(sources)
    Y = np.empty((M + 1, mesh.size))
    Y[0] = problem.Y0 if Y0 is None else np.asarray(Y0, dtype=float)
    ops = _Operators(mesh)
    eye = sp.identity(mesh.size, format="csr")
    lu_cache, counts = {}, np.zeros(M, dtype=int)
    for k in range(M):
        key = integ.level_class[k + 1]
        if key not in lu_cache:
            lu_cache[key] = _factor(eye - theta * dt * integ.generator(k + 1))
        lu = lu_cache[key]
        Yhat = Y[k] if S is None else Y[k] + dt * S[k]
        rhs = Yhat
        if theta < 1:
            rhs = Yhat + (1 - theta) * dt * (integ.generator(k) @ Yhat - ops.apply(nl, Yhat))
        cur = Y[k]
        for it in range(1, max_iter + 1):
            new = lu.solve(rhs - theta * dt * ops.apply(nl, cur))
            change = float(np.max(np.abs(new - cur)))
            scale = max(float(np.max(np.abs(new))), np.finfo(float).tiny)
            cur = new
            if it > 1 and change <= tol * scale or change == 0.0:
                break
        else:
            raise PerStepNoConvergence(k + 1, max_iter, change / scale)
        Y[k + 1] = cur
        counts[k] = it
    return SemilinearTrajectory(Trajectory(Y, mesh, tg), counts)


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------


def linearize(problem, nl: Nonlinearity, values):
    """Frozen coefficients and affine remainder about a trajectory.

    Parameters
    ----------
    problem : ControlProblem
    nl : Nonlinearity
    values : ndarray, shape (M+1, N)
        Stacked linearization trajectory ``ybar``.

    Returns
    -------
    coeffs : CoefficientTables
        ``a + dF/ds``, ``B + dF/dzeta``, ``b + dG/ds``, ``B_G + dG/dgt``
        sampled at every level.
    extra_source : ndarray, shape (M+1, N)
        ``E_k = -r_{k+1}`` with ``r = N(ybar) - N'(ybar) ybar``, aligned with
        the implicit Euler step convention (level ``M`` unused).
    """
    if problem.timegrid.theta != 1.0:
        raise ConfigError("frozen-coefficient linearization requires theta = 1")
    mesh, base = problem.mesh, problem.coeffs
    ops = _Operators(mesh)
    M = problem.timegrid.M
    a, b = base.a.copy(), base.b.copy()
    B, Bg = base.B.copy(), base.B_gamma.copy()
    r = np.zeros((M + 1, mesh.size))
    for k in range(M + 1):
        yb, yg = mesh.split(values[k])
        grads = [G @ yb for G in ops.grads]
        tang = ops.tgrad @ yg
        f1, f2 = nl.bulk_derivatives(yb, grads)
        g1, g2 = nl.boundary_derivatives(yg, tang)
        a[k] += f1
        B[k] += f2
        b[k] += g1
        Bg[k] += g2
        lin_b = f1 * yb + sum(f2[:, d] * grads[d] for d in range(len(grads)))
        lin_g = g1 * yg + g2 * tang
        r[k] = np.concatenate([nl.bulk(yb, grads) - lin_b, nl.boundary(yg, tang) - lin_g])
    E = np.zeros_like(r)
    E[:-1] = -r[1:]
    return base.replace(a=a, b=b, B=B, B_gamma=Bg), E


def _rel_change(problem, new, old):
    w = problem.mesh.weights
    dt = problem.timegrid.dt
    num = np.sqrt(dt * np.einsum("ki,i,ki->", new - old, w, new - old))
    den = np.sqrt(dt * np.einsum("ki,i,ki->", new, w, new))
    if den == 0:
        return 0.0 if num == 0 else np.inf
    return float(num / den)


# ---------------------------------------------------------------------------
# Nash quasi-equilibrium
# ---------------------------------------------------------------------------


@dataclass
class QuasiNashSolution(NashSolution):
    """Nash quasi-equilibrium with outer fixed-point diagnostics."""

    outer_iterations: int = 0
    outer_history: list = field(default_factory=list)
    monotone: bool = True
    linearized_problem: object = None
    extra_source: np.ndarray | None = None


def _history_monotone(hist):
    return bool(all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:])))


def quasi_nash_solve(problem, nl: Nonlinearity, f=None, Y0=None, tol=1e-9, max_iter=50,
                     nash_tol=1e-12, nash_max_iter=500, initial=None) -> QuasiNashSolution:
    """Follower quasi-equilibrium for the semilinear state.

    Each outer iteration freezes the coefficients at the current state,
    solves the linear Nash problem with the affine remainder as a source
    and takes its state as the next linearization point.

    Parameters
    ----------
    problem : ControlProblem
        Linear problem (coefficients without the nonlinearity).
    nl : Nonlinearity
    f : ndarray, optional
        Leader control.
    tol : float
        Relative space-time change of the state that stops the outer loop.
    initial : ndarray, optional
        Starting linearization trajectory (default: semilinear state with
        zero follower controls).

    Raises
    ------
    OuterNoConvergence
        If the outer loop does not reach ``tol`` in ``max_iter`` iterations.
    """
    Y0 = problem.Y0 if Y0 is None else np.asarray(Y0, dtype=float)
    if initial is None:
        src = state_sources(problem, f)
        initial = semilinear_forward(problem, nl, Y0, src).values
    ybar = np.asarray(initial, dtype=float)
    history = []
    for it in range(1, max_iter + 1):
        coeffs, E = linearize(problem, nl, ybar)
        lin = problem.with_coefficients(coeffs)
        sol = nash_solve(lin, f, tol=nash_tol, max_iter=nash_max_iter, Y0=Y0,
                         extra_source=None if nl.is_zero else E, thresholds=False)
        change = _rel_change(problem, sol.y.values, ybar)
        history.append(change)
        ybar = sol.y.values
        if change <= tol:
            break
    else:
        raise OuterNoConvergence(max_iter, history[-1], what="quasi-Nash outer loop")
    mono = _history_monotone(history)
    if not mono:
        logger.warning("quasi-Nash outer residuals are not monotone: %s", history)
    return QuasiNashSolution(
        sol.v1, sol.v2, sol.phi1, sol.phi2, sol.y, sol.iterations, sol.residual, sol.history,
        sol.thresholds, it, history, mono, lin, None if nl.is_zero else E,
    )


def state_sources(problem, f=None, v1=None, v2=None):
    """Bulk source array ``f 1_omega + v1 1_omega1 + v2 1_omega2``."""
    reg = problem.regions
    S = problem.zeros_control()
    for ctrl, region in ((f, reg.omega), (v1, reg.omega1), (v2, reg.omega2)):
        if ctrl is not None:
            S += region.apply(ctrl)
    return S


def semilinear_functionals(problem, nl: Nonlinearity, f=None, Y0=None):
    """Callable ``(i, v1, v2) -> (tracking, penalty)`` on the semilinear state.

    Suitable as the ``functional`` argument of :func:`nash.verify_nash`.
    """
    def functional(i, v1, v2):
        y = semilinear_forward(problem, nl, Y0, state_sources(problem, f, v1, v2))
        return _Ji_parts(problem, i, y.trajectory.bulk, (v1, v2)[i - 1])

    return functional


# ---------------------------------------------------------------------------
# Null control
# ---------------------------------------------------------------------------


def semilinear_null_control(problem, nl: Nonlinearity, eps=1e-3, Y0=None, targets=None,
                            tol=1e-9, max_iter=50, hum_tol=1e-9, hum_max_iter=None,
                            inner_tol=1e-11, solver="cg") -> HumResult:
    """Penalized HUM for the semilinear optimality system by outer fixed point.

    Each outer iteration freezes the coefficients at the current state
    trajectory, runs the linear synthesis (:func:`hum.hum_cg` or
    :func:`hum.hum_prox`) on the linearized system, and then
    solves the semilinear optimality system under the resulting leader
    control (a quasi-Nash solve).  Its state is the next linearization point.

    Parameters
    ----------
    solver : {"cg", "prox"}
        ``"cg"`` minimizes the quadratic penalization (terminal norm of
        order ``sqrt(eps)``), ``"prox"`` the norm penalization (terminal
        norm at most ``eps`` for the linearized system).

    Returns
    -------
    HumResult
        Result of the last linear synthesis with ``Y`` and ``terminal_norm``
        taken from the semilinear optimality system; ``extras`` holds the
        outer history, its monotonicity flag and the last quasi-Nash solution.

    Raises
    ------
    OuterNoConvergence
    """
    if problem.timegrid.theta != 1.0:
        raise ConfigError("semilinear null control requires theta = 1")
    if solver not in ("cg", "prox"):
        raise ConfigError(f"unknown HUM solver {solver!r}")
    Y0 = problem.Y0 if Y0 is None else np.asarray(Y0, dtype=float)
    if targets is not None:
        problem = problem.with_data(targets=targets)
    ybar = semilinear_forward(problem, nl, Y0).values
    history = []
    qn = None
    for it in range(1, max_iter + 1):
        coeffs, E = linearize(problem, nl, ybar)
        lin = problem.with_coefficients(coeffs)
        extra = None if nl.is_zero else E
        if solver == "cg":
            res = hum_cg(lin, Y0, None, eps, hum_tol, hum_max_iter or 500, inner_tol,
                         extra_source=extra)
        else:
            res = hum_prox(lin, Y0, None, eps, hum_tol, hum_max_iter or 100_000, inner_tol,
                           extra_source=extra)
        if nl.is_zero:
            new = res.Y.values
        else:
            qn = quasi_nash_solve(problem, nl, res.f, Y0, tol=min(tol, 1e-10),
                                  max_iter=max_iter, initial=res.Y.values)
            new = qn.y.values
        change = _rel_change(problem, new, ybar)
        history.append(change)
        ybar = new
        if change <= tol:
            break
    else:
        raise OuterNoConvergence(max_iter, history[-1], what="semilinear null-control outer loop")
    mono = _history_monotone(history)
    if not mono:
        logger.warning("semilinear null-control outer residuals are not monotone: %s", history)
    w = problem.mesh.weights
    if qn is not None:
        res.Y = qn.y
        res.terminal_norm = float(np.sqrt(np.dot(w * qn.y.final, qn.y.final)))
    res.extras.update({
        "outer_iterations": it,
        "outer_history": history,
        "outer_monotone": mono,
        "quasi_nash": qn,
    })
    return res
