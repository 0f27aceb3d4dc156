"""Leader synthesis by the penalized Hilbert Uniqueness Method.

For terminal adjoint data ``Z_T`` the adjoint cascade couples a backward
field ``z`` with two forward fields ``psi^i``::

    psi^i forward from 0,    source  -(1/mu_i) z 1_{omega_i}
    z     backward from Z_T, source  (alpha_1 psi^1 + alpha_2 psi^2) 1_{omega_d}

and the optimality system couples the state ``y`` with the follower
adjoints ``phi^i``::

    y     forward from Y0,   source  f 1_omega - sum_i (1/mu_i) phi^i 1_{omega_i}
    phi^i backward from 0,   source  alpha_i (y - y_{i,d}) 1_{omega_d}

The Gramian ``Lambda Z_T = Y(T)`` (cascade, ``f = z 1_omega``, optimality
system with zero data) is self-adjoint positive semidefinite, and the terminal
state under ``f = z 1_omega`` is ``Lambda Z_T + c`` with ``c`` the terminal
state of the uncontrolled optimality system.  Two penalizations are
minimized: ``1/2 <Lambda Z, Z> + <c, Z> + eps/2 ||Z||^2`` by conjugate
gradients and ``... + eps ||Z||`` by accelerated proximal gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, NonFiniteIterate, RhoWeightInfinite
from .krylov import conjugate_gradient, power_iteration
from .pdecore import Trajectory, duality_terms

__all__ = [
    "CascadeSolution",
    "OptimalitySolution",
    "HumResult",
    "cascade_solve",
    "optimality_solve",
    "apply_gramian",
    "linear_term",
    "dense_gramian",
    "extract_control",
    "hum_cg",
    "hum_prox",
    "verify_optimality_system",
    "cost_bound_report",
    "rho_weighted_norm",
]


def extract_control(problem, z_bulk) -> np.ndarray:
    """Leader control ``z 1_omega`` on ``omega x [0, T)`` (zero at the final level)."""
    f = problem.regions.omega.apply(z_bulk)
    f[-1] = 0.0
    return f


def _st_norm(problem, values):
    """Space-time l2 norm over all levels with stacked weights."""
    w = problem.mesh.weights if values.shape[1] == problem.mesh.size else problem.mesh.bulk_weights
    return float(np.sqrt(problem.timegrid.dt * np.einsum("ki,i,ki->", values, w, values)))


def _relative_change(problem, new, old):
    num = _st_norm(problem, new - old)
    den = _st_norm(problem, new)
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return num / den


@dataclass
class CascadeSolution:
    """Adjoint cascade fields."""

    Z: Trajectory
    psi1: Trajectory
    psi2: Trajectory
    picard_iters: int
    picard_residual: float

    @property
    def psis(self):
        return self.psi1, self.psi2

    def H(self, problem) -> np.ndarray:
        """Stacked ``alpha_1 psi^1 + alpha_2 psi^2``."""
        a1, a2 = problem.alphas
        return a1 * self.psi1.values + a2 * self.psi2.values


def cascade_solve(problem, Z_T, tol=None, max_iter=None) -> CascadeSolution:
    """Solve the adjoint cascade by Picard iteration.

    Parameters
    ----------
    problem : ControlProblem
    Z_T : ndarray
        Stacked terminal data.
    tol : float, optional
        Relative change of ``z`` between sweeps (default ``problem.picard_tol``).
    max_iter : int, optional

    Raises
    ------
    NoConvergence
        If the iteration does not contract within ``max_iter`` sweeps.
    """
    tol = problem.picard_tol if tol is None else tol
    max_iter = problem.picard_max_iter if max_iter is None else max_iter
    integ, reg = problem.integrator, problem.regions
    (a1, a2), (m1, m2) = problem.alphas, problem.mus
    Z_T = np.asarray(Z_T, dtype=float)
    z = integ.backward(Z_T)
    change = 0.0
    for it in range(1, max_iter + 1):
        src = -(a1 / m1) * reg.omega1.apply(z.bulk) - (a2 / m2) * reg.omega2.apply(z.bulk)
        H = integ.forward(None, src)
        z_new = integ.backward(Z_T, reg.omega_d.apply(H.bulk))
        change = _relative_change(problem, z_new.values, z.values)
        z = z_new
        if change <= tol:
            break
    else:
        raise NoConvergence(max_iter, change, what="adjoint cascade Picard")
    psi1 = integ.forward(None, -reg.omega1.apply(z.bulk) / m1)
    psi2 = integ.forward(None, -reg.omega2.apply(z.bulk) / m2)
    return CascadeSolution(z, psi1, psi2, it, change)


@dataclass
class OptimalitySolution:
    """State and follower adjoints of the optimality system."""

    Y: Trajectory
    phi1: Trajectory
    phi2: Trajectory
    picard_iters: int
    picard_residual: float

    @property
    def phis(self):
        return self.phi1, self.phi2


def optimality_solve(
    problem, f=None, Y0=None, targets=None, extra_source=None, tol=None, max_iter=None
) -> OptimalitySolution:
    """Solve the state / follower-adjoint system by Picard iteration.

    Parameters
    ----------
    problem : ControlProblem
    f : ndarray, shape (M+1, n_bulk), optional
        Leader control (zero if omitted).
    Y0 : ndarray, optional
        Initial state (default ``problem.Y0``).
    targets : pair of ndarray, optional
        Follower targets (default ``problem.targets``).
    extra_source : ndarray, optional
        Additional known source (bulk or stacked shape).
    """
    tol = problem.picard_tol if tol is None else tol
    max_iter = problem.picard_max_iter if max_iter is None else max_iter
    integ, reg = problem.integrator, problem.regions
    Y0 = problem.Y0 if Y0 is None else np.asarray(Y0, dtype=float)
    targets = problem.targets if targets is None else targets
    (a1, a2), (m1, m2) = problem.alphas, problem.mus

    base = problem.zeros_control()
    if f is not None:
        base = base + reg.omega.apply(f)
    if extra_source is not None:
        if extra_source.shape == base.shape:
            base = base + extra_source
        else:
            base = np.concatenate([base, np.zeros((base.shape[0], problem.mesh.n_boundary))], 1)
            base = base + extra_source
    nb = problem.mesh.n_bulk

    # backward responses to the targets are fixed: phi^i = alpha_i (P_y - P_i)
    P_targets = [
        integ.backward(None, reg.omega_d.apply(t)).bulk if np.any(reg.omega_d.apply(t)) else None
        for t in targets
    ]

    def follower_source(P_y):
        src = np.zeros_like(base)
        for i, (alpha, mu, Pt, region) in enumerate(
            ((a1, m1, P_targets[0], reg.omega1), (a2, m2, P_targets[1], reg.omega2))
        ):
            phi = alpha * (P_y if Pt is None else P_y - Pt)
            src[:, :nb] -= region.apply(phi) / mu
        return src

    Y = integ.forward(Y0, base)
    change = 0.0
    for it in range(1, max_iter + 1):
        P_y = integ.backward(None, reg.omega_d.apply(Y.bulk)).bulk
        Y_new = integ.forward(Y0, base + follower_source(P_y))
        change = _relative_change(problem, Y_new.values, Y.values)
        Y = Y_new
        if change <= tol:
            break
    else:
        raise NoConvergence(max_iter, change, what="optimality-system Picard")
    phis = []
    for i in (1, 2):
        fol = problem.follower(i)
        src = fol.alpha * reg.omega_d.apply(Y.bulk - targets[i - 1])
        phis.append(integ.backward(None, src))
    return OptimalitySolution(Y, phis[0], phis[1], it, change)


def apply_gramian(problem, Z_T, tol=None) -> np.ndarray:
    """``Lambda Z_T``: terminal state of the zero-data optimality system under ``z 1_omega``."""
    casc = cascade_solve(problem, Z_T, tol)
    f = extract_control(problem, casc.Z.bulk)
    zero_t = (problem.zeros_control(), problem.zeros_control())
    opt = optimality_solve(problem, f, np.zeros(problem.mesh.size), zero_t, tol=tol)
    return opt.Y.final.copy()


def linear_term(problem, Y0=None, targets=None, extra_source=None, tol=None) -> np.ndarray:
    """``c``: terminal state of the optimality system without leader control."""
    opt = optimality_solve(problem, None, Y0, targets, extra_source, tol=tol)
    return opt.Y.final.copy()


def dense_gramian(problem, tol=None) -> np.ndarray:
    """Matrix of the Gramian in stacked coordinates (one application per column)."""
    N = problem.mesh.size
    G = np.empty((N, N))
    for j in range(N):
        e = np.zeros(N)
        e[j] = 1.0
        G[:, j] = apply_gramian(problem, e, tol)
    return G


@dataclass
class HumResult:
    """Output of a penalized HUM minimization."""

    Z_T: np.ndarray
    f: np.ndarray
    Y: Trajectory
    terminal_norm: float
    control_norm: float
    J_eps: float
    objective: float
    epsilon: float
    solver: str
    iterations: int
    trace: list = field(default_factory=list)
    cascade: CascadeSolution | None = None
    optimality: OptimalitySolution | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "terminal_norm": self.terminal_norm,
            "control_norm": self.control_norm,
            "iterations": self.iterations,
            "J_eps": self.J_eps,
            "objective": self.objective,
            "solver": self.solver,
        }


def _dual_functional(problem, casc, Z_T, Y0, targets, eps):
    """Nonsmooth dual functional evaluated from cascade outputs."""
    reg, w = problem.regions, problem.mesh.weights
    zo = reg.omega.apply(casc.Z.bulk)
    val = 0.5 * problem.control_inner(zo, zo)
    val += eps * np.sqrt(max(float(np.dot(w * Z_T, Z_T)), 0.0))
    val += float(np.dot(w * Y0, casc.Z.initial))
    for alpha, t, psi in zip(problem.alphas, targets, casc.psis):
        val -= alpha * problem.observation_inner(reg.omega_d.apply(t), psi.bulk)
    return float(val)


def _finish(problem, Z_T, Y0, targets, eps, solver, iterations, trace, extra_source, inner_tol, quad):
    casc = cascade_solve(problem, Z_T, inner_tol)
    f = extract_control(problem, casc.Z.bulk)
    opt = optimality_solve(problem, f, Y0, targets, extra_source, tol=inner_tol)
    w = problem.mesh.weights
    terminal = float(np.sqrt(np.dot(w * opt.Y.final, opt.Y.final)))
    J = _dual_functional(problem, casc, Z_T, Y0, targets, eps)
    return HumResult(
        Z_T=Z_T,
        f=f,
        Y=opt.Y,
        terminal_norm=terminal,
        control_norm=float(np.sqrt(problem.control_inner(f, f))),
        J_eps=J,
        objective=quad,
        epsilon=eps,
        solver=solver,
        iterations=iterations,
        trace=trace,
        cascade=casc,
        optimality=opt,
    )


def hum_cg(
    problem,
    Y0=None,
    targets=None,
    eps=1e-3,
    tol=1e-9,
    max_iter=500,
    inner_tol=1e-11,
    extra_source=None,
    callback=None,
) -> HumResult:
    """Quadratically penalized HUM: solve ``(Lambda + eps I) Z_T = -c`` by CG.

    Parameters
    ----------
    problem : ControlProblem
    Y0, targets : optional
        Override the problem's initial state and follower targets.
    eps : float
        Penalty parameter (> 0).
    tol : float
        Relative residual tolerance of CG.
    inner_tol : float
        Picard tolerance of every Gramian application.
    extra_source : ndarray, optional
        Known affine source entering the linear term.
    callback : callable, optional
        ``callback(k, Z_T)`` after each CG iteration.

    Returns
    -------
    HumResult
        ``J_eps`` is the nonsmooth dual functional at the output,
        ``objective`` the minimized quadratic functional.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    Y0 = problem.Y0 if Y0 is None else np.asarray(Y0, dtype=float)
    targets = problem.targets if targets is None else targets
    w = problem.mesh.weights
    c = linear_term(problem, Y0, targets, extra_source, inner_tol)

    def inner(u, v):
        return float(np.dot(w * u, v))

    def op(Z):
        return apply_gramian(problem, Z, inner_tol) + eps * Z

    res = conjugate_gradient(op, -c, inner, tol, max_iter, callback=callback, what="HUM CG")
    Z = res.x
    quad = 0.5 * inner(op(Z), Z) + inner(c, Z) if res.iterations else 0.0
    out = _finish(problem, Z, Y0, targets, eps, "cg", res.iterations, res.history, extra_source, inner_tol, quad)
    out.extras["linear_term_norm"] = float(np.sqrt(inner(c, c)))
    return out


def _block_soft_threshold(u, t):
    n = np.linalg.norm(u)
    if n <= t:
        return np.zeros_like(u)
    return (1.0 - t / n) * u


def hum_prox(
    problem,
    Y0=None,
    targets=None,
    eps=1e-3,
    tol=1e-9,
    max_iter=100000,
    inner_tol=1e-11,
    extra_source=None,
    dense=None,
    margin=1e-2,
) -> HumResult:
    """Exact penalization ``eps ||Z_T||`` by accelerated proximal gradients.

    Minimizes ``F(Z) + eps ||Z||`` with ``F(Z) = 1/2 <Lambda Z, Z> + <c, Z>``
    using FISTA with adaptive (gradient) restart in weighted coordinates
    ``u = W^{1/2} Z`` where the norm is Euclidean and the prox is block soft
    thresholding.  Stops when the subgradient residual
    ``||Lambda Z + c + eps Z/||Z|| ||`` is at most ``tol * ||c||``, or, at
    ``Z = 0``, when ``||c|| <= eps (1 + tol)``.

    Parameters
    ----------
    dense : bool, optional
        Assemble the Gramian once (one application per unknown) and iterate
        on the matrix; default when the mesh has at most 400 unknowns.
    margin : float
        Relative safety margin on the Lipschitz constant.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    Y0 = problem.Y0 if Y0 is None else np.asarray(Y0, dtype=float)
    targets = problem.targets if targets is None else targets
    w = problem.mesh.weights
    sw = np.sqrt(w)
    N = problem.mesh.size
    dense = N <= 400 if dense is None else dense
    c = linear_term(problem, Y0, targets, extra_source, inner_tol)
    ct = sw * c
    cnorm = float(np.linalg.norm(ct))

    if dense:
        G = dense_gramian(problem, inner_tol)
        Gt = (sw[:, None] * G) / sw[None, :]
        Gt = 0.5 * (Gt + Gt.T)
        L = float(np.linalg.eigvalsh(Gt)[-1])

        def grad(u):
            return Gt @ u + ct

    else:

        def grad(u):
            return sw * apply_gramian(problem, u / sw, inner_tol) + ct

        rng = np.random.default_rng(0)
        L = power_iteration(lambda u: grad(u) - ct, rng.standard_normal(N), np.dot, 50)

    L *= 1.0 + margin
    step = 1.0 / L
    trace = []

    def subgradient_residual(u, g):
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return max(cnorm - eps, 0.0), True
        return float(np.linalg.norm(g + eps * u / nu)), False

    u = np.zeros(N)
    it = 0
    converged = cnorm <= eps * (1 + tol)
    if not converged:
        x_prev = u.copy()
        y = u.copy()
        tk = 1.0
        for it in range(1, max_iter + 1):
            x = _block_soft_threshold(y - step * grad(y), step * eps)
            if not np.all(np.isfinite(x)):
                raise NonFiniteIterate("proximal iterate is not finite")
            res, at_zero = subgradient_residual(x, grad(x))
            trace.append(res)
            u = x
            if not at_zero and res <= tol * cnorm:
                converged = True
                break
            # adaptive restart when the momentum step points uphill
            if np.dot(y - x, x - x_prev) > 0:
                tk = 1.0
                y = x.copy()
            else:
                t_next = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
                y = x + ((tk - 1) / t_next) * (x - x_prev)
                tk = t_next
            x_prev = x
    if not converged:
        raise NoConvergence(max_iter, trace[-1] if trace else np.inf, what="HUM proximal gradient")
    Z = u / sw
    g = grad(u)
    quad = 0.5 * float(np.dot(g - ct, u)) + float(np.dot(ct, u)) + eps * float(np.linalg.norm(u))
    out = _finish(problem, Z, Y0, targets, eps, "prox", it, trace, extra_source, inner_tol, quad)
    res, at_zero = subgradient_residual(u, g)
    out.extras.update(
        {
            "linear_term_norm": cnorm,
            "lipschitz": L,
            "subgradient_residual": res,
            "zero_branch": at_zero,
            "dense": bool(dense),
        }
    )
    return out


def _step_residuals(problem, traj, sources, forward=True):
    """Relative residual of the discrete time-step equations along a trajectory."""
    integ = problem.integrator
    M, dt = problem.timegrid.M, problem.timegrid.dt
    S = integ._source_array(sources)
    w = problem.mesh.weights
    V = traj.values
    err = 0.0
    if forward:
        for k in range(M):
            rhs = V[k] if S is None else V[k] + dt * S[k]
            err += np.sum((V[k + 1] - integ._steps[k].apply(rhs)) ** 2 * w)
    else:
        for k in range(M, 0, -1):
            v = V[k] if S is None else V[k] + dt * S[k]
            err += np.sum((V[k - 1] - integ._steps[k - 1].apply_transpose(w * v) / w) ** 2 * w)
    scale = np.sqrt(np.sum(V**2 * w))
    err = np.sqrt(err)
    return float(err / scale) if scale > 0 else float(err)


def verify_optimality_system(problem, result: HumResult, Y0=None, targets=None, extra_source=None, tol=None) -> dict:
    """Re-solve all six coupled fields from ``Z_T`` and report equation residuals.

    Returns
    -------
    dict
        Relative residual of each discrete equation (``Y``, ``Z``, ``phi1``,
        ``phi2``, ``psi1``, ``psi2``), initial/terminal condition errors,
        ``f_mismatch`` between the stored control and ``z 1_omega`` and
        ``max_equation`` over the six equations.
    """
    Y0 = problem.Y0 if Y0 is None else np.asarray(Y0, dtype=float)
    targets = problem.targets if targets is None else targets
    reg = problem.regions
    (a1, a2), (m1, m2) = problem.alphas, problem.mus
    casc = cascade_solve(problem, result.Z_T, tol)
    f = extract_control(problem, casc.Z.bulk)
    opt = optimality_solve(problem, f, Y0, targets, extra_source, tol=tol)
    Y, (phi1, phi2) = opt.Y, opt.phis
    z, (psi1, psi2) = casc.Z, casc.psis

    y_src = f - reg.omega1.apply(phi1.bulk) / m1 - reg.omega2.apply(phi2.bulk) / m2
    if extra_source is not None:
        y_src = y_src + extra_source if extra_source.shape == y_src.shape else np.concatenate(
            [y_src, np.zeros((y_src.shape[0], problem.mesh.n_boundary))], 1
        ) + extra_source
    out = {
        "Y": _step_residuals(problem, Y, y_src),
        "phi1": _step_residuals(problem, phi1, a1 * reg.omega_d.apply(Y.bulk - targets[0]), False),
        "phi2": _step_residuals(problem, phi2, a2 * reg.omega_d.apply(Y.bulk - targets[1]), False),
        "psi1": _step_residuals(problem, psi1, -reg.omega1.apply(z.bulk) / m1),
        "psi2": _step_residuals(problem, psi2, -reg.omega2.apply(z.bulk) / m2),
        "Z": _step_residuals(
            problem, z, reg.omega_d.apply(a1 * psi1.bulk + a2 * psi2.bulk), False
        ),
    }
    out["max_equation"] = max(out.values())
    out["initial_Y"] = float(np.abs(Y.initial - Y0).max())
    out["initial_psi"] = float(max(np.abs(psi1.initial).max(), np.abs(psi2.initial).max()))
    out["terminal_Z"] = float(np.abs(z.final - result.Z_T).max())
    out["terminal_phi"] = float(max(np.abs(phi1.final).max(), np.abs(phi2.final).max()))
    fn = np.sqrt(problem.control_inner(result.f, result.f))
    diff = result.f - f
    mis = np.sqrt(problem.control_inner(diff, diff)) + float(np.abs(diff[-1]).max())
    out["f_mismatch"] = float(mis / fn) if fn > 0 else float(mis)
    out["duality_residual"] = duality_terms(Y, z, f, casc.psis, targets, problem.alphas, reg)["residual"]
    return out


_LOG_MAX = np.log(np.finfo(float).max)


def rho_weighted_norm(problem, log_rho, field_) -> float:
    """``||rho y||`` over ``omega_d x (0,T)`` computed in log space.

    Parameters
    ----------
    log_rho : ndarray, shape (M+1,)
        ``log rho(t_k)`` (``inf`` where the weight is unbounded).
    field_ : ndarray, shape (M+1, n_bulk)

    Raises
    ------
    RhoWeightInfinite
        If any nonzero contribution exceeds the floating-point range.
    """
    reg = problem.regions.omega_d
    vals = reg.apply(field_)
    tw = problem.timegrid.state_weights
    total_log = []
    for k in range(vals.shape[0]):
        nz = vals[k] != 0
        if tw[k] == 0 or not nz.any():
            continue
        lr = log_rho[k]
        terms = 2 * lr + 2 * np.log(np.abs(vals[k][nz])) + np.log(tw[k] * problem.mesh.bulk_weights[nz])
        if not np.all(np.isfinite(terms)) or terms.max() > _LOG_MAX - 40:
            raise RhoWeightInfinite(
                f"rho-weighted target norm overflows at t={problem.timegrid.times[k]:.6g}: "
                "target does not vanish fast enough as t approaches T"
            )
        total_log.append(terms)
    if not total_log:
        return 0.0
    allt = np.concatenate(total_log)
    mx = allt.max()
    return float(np.exp(0.5 * (mx + np.log(np.sum(np.exp(allt - mx))))))


def cost_bound_report(problem, result: HumResult, log_rho, Y0=None, targets=None) -> dict:
    """Empirical control-cost constant ``||f|| / (||Y0|| + sum_i ||rho y_{i,d}||)``.

    Parameters
    ----------
    log_rho : ndarray, shape (M+1,)
        Logarithm of the weight ``rho`` at the time levels (see
        :meth:`CarlemanWeights.log_rho`).
    """
    Y0 = problem.Y0 if Y0 is None else np.asarray(Y0, dtype=float)
    targets = problem.targets if targets is None else targets
    y0n = problem.state_norm(Y0)
    rn = [rho_weighted_norm(problem, log_rho, t) for t in targets]
    den = y0n + sum(rn)
    fn = result.control_norm
    return {
        "control_norm": fn,
        "Y0_norm": y0n,
        "rho_target_norms": rn,
        "C_emp": float(fn / den) if den > 0 else (0.0 if fn == 0 else float("inf")),
        "epsilon": result.epsilon,
        "terminal_norm": result.terminal_norm,
    }
