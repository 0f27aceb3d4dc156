"""Follower game: cost functionals, control-to-state operators and Nash solve.

Given the leader control ``f`` on ``omega``, each follower ``i`` chooses
``v_i`` on ``omega_i`` to make stationary

    J_i = alpha_i/2 int int_{omega_d} |y - y_{i,d}|^2 + mu_i/2 int int_{omega_i} |v_i|^2 .

With ``l_i v_i`` the bulk state driven by ``v_i`` from zero initial data and
``q`` the bulk state driven by ``f`` from ``Y0``, the equilibrium solves the
linear system ``R(v) = rhs`` with

    R_i(v) = alpha_i l_i^*[(l_1 v_1 + l_2 v_2) 1_{omega_d}] + mu_i v_i,
    rhs_i  = alpha_i l_i^*[(y_{i,d} - q) 1_{omega_d}].

Because both followers track on the same set, ``diag(1/alpha) R`` is
self-adjoint and positive definite for the control inner product, so plain
conjugate gradients apply; each application costs one forward and one
backward solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .krylov import conjugate_gradient, power_iteration
from .pdecore import Trajectory

__all__ = [
    "MuThresholdReport",
    "NashSolution",
    "eval_J",
    "eval_Ji",
    "state",
    "follower_adjoint",
    "gradient_Ji",
    "apply_elli",
    "apply_elli_adjoint",
    "elli_norm_sq",
    "check_mu_thresholds",
    "apply_R",
    "nash_rhs",
    "nash_solve",
    "characterization_residual",
    "verify_nash",
]

log = logging.getLogger(__name__)


def _active(problem, i):
    """Mask of control unknowns of follower ``i`` (region nodes, levels < M)."""
    mask = np.zeros(problem.control_shape(), dtype=bool)
    mask[:-1] = problem.regions.follower(i).mask
    return mask


def _restrict(problem, region, field_):
    out = np.where(region.mask, field_, 0.0)
    out[-1] = 0.0
    return out


def eval_J(problem, f) -> float:
    """Leader cost ``1/2 int int_omega |f|^2``."""
    fo = problem.regions.omega.apply(f)
    return 0.5 * problem.control_inner(fo, fo)


def _sources(problem, f=None, v1=None, v2=None, extra=None):
    reg = problem.regions
    S = problem.zeros_control()
    if f is not None:
        S += reg.omega.apply(f)
    if v1 is not None:
        S += reg.omega1.apply(v1)
    if v2 is not None:
        S += reg.omega2.apply(v2)
    if extra is not None:
        S = S + extra if extra.shape == S.shape else _pad(problem, S) + extra
    return S


def _pad(problem, S):
    return np.concatenate(
        [S, np.zeros((S.shape[0], problem.mesh.n_boundary))], axis=1
    )


def state(problem, f=None, v1=None, v2=None, Y0=None, extra_source=None) -> Trajectory:
    """State trajectory driven by leader and follower controls.

    ``extra_source`` (bulk or stacked shape) is added to the right-hand side;
    it carries the affine part of frozen-coefficient linearizations.
    """
    Y0 = problem.Y0 if Y0 is None else Y0
    return problem.integrator.forward(Y0, _sources(problem, f, v1, v2, extra_source))


def _Ji_parts(problem, i, y_bulk, v_i):
    fol = problem.follower(i)
    dev = problem.regions.omega_d.apply(y_bulk - fol.target)
    track = 0.5 * fol.alpha * problem.observation_inner(dev, dev)
    vi = problem.regions.follower(i).apply(v_i)
    pen = 0.5 * fol.mu * problem.control_inner(vi, vi)
    return track, pen


def eval_Ji(problem, i, f, v1, v2, Y0=None, extra_source=None) -> float:
    """Follower cost ``J_i(f; v1, v2)``."""
    y = state(problem, f, v1, v2, Y0, extra_source)
    track, pen = _Ji_parts(problem, i, y.bulk, (v1, v2)[i - 1])
    return track + pen


def follower_adjoint(problem, i, y_bulk) -> Trajectory:
    """Adjoint state ``phi^i`` with source ``alpha_i (y - y_{i,d}) 1_{omega_d}``."""
    fol = problem.follower(i)
    src = fol.alpha * problem.regions.omega_d.apply(y_bulk - fol.target)
    return problem.integrator.backward(None, src)


def gradient_Ji(problem, i, f, v1, v2, Y0=None, extra_source=None):
    """Gradient of ``J_i`` in ``v_i`` for the control inner product.

    Equals ``(phi^i + mu_i v_i)`` restricted to ``omega_i``.
    """
    y = state(problem, f, v1, v2, Y0, extra_source)
    phi = follower_adjoint(problem, i, y.bulk)
    vi = (v1, v2)[i - 1]
    return _restrict(problem, problem.regions.follower(i), phi.bulk + problem.follower(i).mu * vi)


def apply_elli(problem, i, v) -> np.ndarray:
    """Bulk state driven by ``v 1_{omega_i}`` from zero initial data."""
    src = problem.regions.follower(i).apply(v)
    return problem.integrator.forward(None, src).bulk


def apply_elli_adjoint(problem, i, w) -> np.ndarray:
    """Adjoint of :func:`apply_elli` composed with the ``omega_d`` indicator.

    Satisfies ``observation_inner(apply_elli(v) 1_{omega_d}, w) ==
    control_inner(v, apply_elli_adjoint(w))`` up to rounding.
    """
    src = problem.regions.omega_d.apply(w)
    z = problem.integrator.backward(None, src).bulk
    return _restrict(problem, problem.regions.follower(i), z)


def elli_norm_sq(problem, i, n_iter=30, seed=0) -> float:
    """Power-iteration estimate of ``||1_{omega_d} l_i||^2``."""
    rng = np.random.default_rng(seed)
    x0 = np.where(_active(problem, i), rng.standard_normal(problem.control_shape()), 0.0)

    def normal_op(v):
        return apply_elli_adjoint(problem, i, apply_elli(problem, i, v))

    return power_iteration(normal_op, x0, problem.control_inner, n_iter)


@dataclass
class MuThresholdReport:
    """Sufficient conditions for invertibility of ``R``.

    ``4 mu_1 > alpha_2 ||1_{omega_d} l_1||^2`` and
    ``4 mu_2 > alpha_1 ||1_{omega_d} l_2||^2``.
    """

    norm_sq: tuple
    condition1: bool
    condition2: bool
    margins: tuple
    warnings: list = field(default_factory=list)

    @property
    def satisfied(self) -> bool:
        return self.condition1 and self.condition2

    def to_dict(self) -> dict:
        return {
            "norm_sq_l1": self.norm_sq[0],
            "norm_sq_l2": self.norm_sq[1],
            "condition1": self.condition1,
            "condition2": self.condition2,
            "margin1": self.margins[0],
            "margin2": self.margins[1],
            "warnings": list(self.warnings),
        }


def check_mu_thresholds(problem, n_iter=30, seed=0) -> MuThresholdReport:
    """Estimate the operator norms and test the penalty thresholds (warn only)."""
    (a1, a2), (m1, m2) = problem.alphas, problem.mus
    n1 = elli_norm_sq(problem, 1, n_iter, seed)
    n2 = elli_norm_sq(problem, 2, n_iter, seed + 1)
    c1 = 4 * m1 > a2 * n1
    c2 = 4 * m2 > a1 * n2
    warnings = []
    if not c1:
        warnings.append(f"penalty threshold violated: 4*mu1={4 * m1:.3e} <= alpha2*||l1||^2={a2 * n1:.3e}")
    if not c2:
        warnings.append(f"penalty threshold violated: 4*mu2={4 * m2:.3e} <= alpha1*||l2||^2={a1 * n2:.3e}")
    for w in warnings:
        log.warning(w)
    return MuThresholdReport((n1, n2), c1, c2, (4 * m1 - a2 * n1, 4 * m2 - a1 * n2), warnings)


def _coupled_observation(problem, v1, v2):
    """``l^*``-ready backward field of ``(l_1 v_1 + l_2 v_2) 1_{omega_d}``."""
    reg = problem.regions
    y = problem.integrator.forward(None, reg.omega1.apply(v1) + reg.omega2.apply(v2)).bulk
    return problem.integrator.backward(None, reg.omega_d.apply(y)).bulk


def apply_R(problem, v1, v2):
    """The equilibrium operator ``R(v1, v2)``."""
    P = _coupled_observation(problem, v1, v2)
    out = []
    for i, v in ((1, v1), (2, v2)):
        fol = problem.follower(i)
        reg = problem.regions.follower(i)
        out.append(_restrict(problem, reg, fol.alpha * P + fol.mu * v))
    return tuple(out)


def nash_rhs(problem, f=None, Y0=None, extra_source=None):
    """Right-hand side of ``R(v) = rhs`` and the bulk state ``q`` driven by ``f``."""
    q = state(problem, f, None, None, Y0, extra_source).bulk
    rhs = []
    for i in (1, 2):
        fol = problem.follower(i)
        src = problem.regions.omega_d.apply(fol.target - q)
        z = problem.integrator.backward(None, src).bulk
        rhs.append(_restrict(problem, problem.regions.follower(i), fol.alpha * z))
    return tuple(rhs), q


@dataclass
class NashSolution:
    """Follower equilibrium and diagnostics."""

    v1: np.ndarray
    v2: np.ndarray
    phi1: Trajectory
    phi2: Trajectory
    y: Trajectory
    iterations: int
    residual: float
    history: list
    thresholds: MuThresholdReport | None = None

    @property
    def controls(self):
        return self.v1, self.v2

    @property
    def phis(self):
        return self.phi1, self.phi2


def _pair_inner(problem):
    def inner(u, v):
        return problem.control_inner(u[0], v[0]) + problem.control_inner(u[1], v[1])

    return inner


def nash_solve(
    problem,
    f=None,
    tol=1e-10,
    max_iter=500,
    method="cg",
    Y0=None,
    extra_source=None,
    thresholds=True,
) -> NashSolution:
    """Compute the follower Nash equilibrium for a given leader control.

    Parameters
    ----------
    problem : ControlProblem
    f : ndarray, shape (M+1, n_bulk), optional
        Leader control (zero if omitted).
    tol : float
        Relative residual tolerance of the Krylov solve.
    max_iter : int
    method : {"cg", "cgnr"}
        ``"cg"`` solves the alpha-scaled self-adjoint system, ``"cgnr"`` the
        normal equations of the unscaled operator.
    Y0 : ndarray, optional
        Initial state overriding ``problem.Y0``.
    extra_source : ndarray, optional
        Additional known source in the state equation.
    thresholds : bool or MuThresholdReport
        Compute (or reuse) the penalty threshold report; violations only warn.

    Returns
    -------
    NashSolution
        Controls, adjoints recomputed from their defining equations, state,
        and the residual ``||R v - rhs|| / ||rhs||``.
    """
    report = None
    if thresholds is True:
        report = check_mu_thresholds(problem)
    elif thresholds:
        report = thresholds
    (r1, r2), _ = nash_rhs(problem, f, Y0, extra_source)
    alphas = problem.alphas
    inner = _pair_inner(problem)
    rhs = np.stack([r1, r2])

    if method == "cg":

        def op(v):
            P = _coupled_observation(problem, v[0], v[1])
            out = np.empty_like(v)
            for i in (1, 2):
                ratio = problem.follower(i).mu / alphas[i - 1]
                out[i - 1] = _restrict(problem, problem.regions.follower(i), P + ratio * v[i - 1])
            return out

        b = np.stack([r1 / alphas[0], r2 / alphas[1]])
        res = conjugate_gradient(op, b, inner, tol, max_iter, what="Nash CG")
    elif method == "cgnr":

        def R(v):
            return np.stack(apply_R(problem, v[0], v[1]))

        def R_adj(u):
            # R = D_alpha S with S self-adjoint, hence R^* = S D_alpha
            Ru = R(np.stack([alphas[0] * u[0], alphas[1] * u[1]]))
            return np.stack([Ru[0] / alphas[0], Ru[1] / alphas[1]])

        res = conjugate_gradient(lambda v: R_adj(R(v)), R_adj(rhs), inner, tol * 1e-2, max_iter, what="Nash CGNR")
    else:
        raise ValueError(f"unknown Nash solver method {method!r}")

    v1, v2 = res.x[0], res.x[1]
    Rv = np.stack(apply_R(problem, v1, v2))
    rnorm = np.sqrt(inner(rhs, rhs))
    residual = np.sqrt(inner(Rv - rhs, Rv - rhs)) / rnorm if rnorm > 0 else float(
        np.sqrt(inner(Rv, Rv))
    )
    y = state(problem, f, v1, v2, Y0, extra_source)
    phi1 = follower_adjoint(problem, 1, y.bulk)
    phi2 = follower_adjoint(problem, 2, y.bulk)
    return NashSolution(v1, v2, phi1, phi2, y, res.iterations, float(residual), res.history, report)


def characterization_residual(problem, sol: NashSolution):
    """Relative residuals ``||v_i + phi^i/mu_i|_{omega_i}|| / ||v_i||``."""
    out = []
    for i, (v, phi) in enumerate(zip(sol.controls, sol.phis), start=1):
        reg = problem.regions.follower(i)
        diff = _restrict(problem, reg, v + phi.bulk / problem.follower(i).mu)
        num = np.sqrt(problem.control_inner(diff, diff))
        den = np.sqrt(problem.control_inner(v, v))
        out.append(float(num / den) if den > 0 else float(num))
    return tuple(out)


def verify_nash(problem, f, v1, v2, n_dirs=10, seed=0, Y0=None, extra_source=None, functional=None):
    """Central-difference stationarity check of ``J_i`` in ``v_i``.

    For each follower, ``n_dirs`` random unit directions supported on
    ``omega_i x (0,T)`` are drawn.  The tracking and penalty parts of ``J_i``
    are differentiated separately; the normalized magnitude is
    ``|dTrack + dPen| / (|dTrack| + |dPen|)``, which is 0 at a stationary
    point and of order one elsewhere.

    Parameters
    ----------
    functional : callable, optional
        ``functional(i, v1, v2) -> (tracking, penalty)``; defaults to the
        linear state model.  Used for semilinear checks.

    Returns
    -------
    tuple of float
        Maximum normalized derivative magnitude for each follower.
    """
    rng = np.random.default_rng(seed)

    if functional is None:

        def functional(i, a, b):
            y = state(problem, f, a, b, Y0, extra_source)
            return _Ji_parts(problem, i, y.bulk, (a, b)[i - 1])

    out = []
    for i in (1, 2):
        active = _active(problem, i)
        v = (v1, v2)[i - 1]
        scale = max(1.0, np.sqrt(problem.control_inner(v, v)))
        h = 1e-3 * scale
        worst = 0.0
        for _ in range(n_dirs):
            d = np.where(active, rng.standard_normal(active.shape), 0.0)
            d /= np.sqrt(problem.control_inner(d, d))

            def parts(step):
                a, b = (v1 + step * d, v2) if i == 1 else (v1, v2 + step * d)
                return functional(i, a, b)

            tp, pp = parts(h)
            tm, pm = parts(-h)
            dt_ = (tp - tm) / (2 * h)
            dp = (pp - pm) / (2 * h)
            den = abs(dt_) + abs(dp)
            val = abs(dt_ + dp) / den if den > 0 else 0.0
            worst = max(worst, val)
        out.append(worst)
    return tuple(out)
