"""Dense brute-force cross-checks of the matrix-free solvers on tiny grids.

Space-time operators are assembled as explicit matrices from the dense
generator, and the coupled systems (adjoint cascade, optimality system, Nash
equations) are solved by direct factorization.  The results are compared
with the iterative, matrix-free pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .hum import cascade_solve, dense_gramian, extract_control, optimality_solve
from .nash import _active, apply_R, elli_norm_sq, nash_rhs, nash_solve
from .pdecore import dense_generator, duality_terms

__all__ = ["DenseSpaceTime", "dense_R", "run_oracles", "ORACLE_TOL"]

ORACLE_TOL = 1e-8


def _rel(a, b):
    den = max(np.linalg.norm(b), np.finfo(float).tiny)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / den)


class DenseSpaceTime:
    """Explicit space-time matrices of the theta-scheme.

    Vectors are level-major: entry ``k*N + i`` is node ``i`` at level ``k``.

    Attributes
    ----------
    P : list of ndarray
        Step matrices ``(I - theta dt K_{k+1})^{-1} (I + (1-theta) dt K_k)``.
    F : ndarray
        Source-to-trajectory map of the forward scheme.
    G0 : ndarray
        Initial-state-to-trajectory map.
    B : ndarray
        Source-to-trajectory map of the backward (weighted adjoint) scheme.
    BT : ndarray
        Terminal-data-to-trajectory map of the backward scheme.
    """

    def __init__(self, problem):
        mesh, tg = problem.mesh, problem.timegrid
        N, M, dt, th = mesh.size, tg.M, tg.dt, tg.theta
        self.N, self.M = N, M
        eye = np.eye(N)
        K = [dense_generator(mesh, problem.coeffs, k, problem.integrator.upwind) for k in range(M + 1)]
        self.P = [np.linalg.solve(eye - th * dt * K[k + 1], eye + (1 - th) * dt * K[k]) for k in range(M)]
        w = mesh.weights
        PT = [(P.T * w) / w[:, None] for P in self.P]  # W^{-1} P^T W
        size = (M + 1) * N
        F = np.zeros((size, size))
        G0 = np.zeros((size, N))
        G0[:N] = eye
        for k in range(M):
            rows = slice((k + 1) * N, (k + 2) * N)
            prev = slice(k * N, (k + 1) * N)
            F[rows] = self.P[k] @ F[prev]
            F[rows, prev] += dt * self.P[k]
            G0[rows] = self.P[k] @ G0[prev]
        B = np.zeros((size, size))
        BT = np.zeros((size, N))
        BT[M * N:] = eye
        for k in range(M, 0, -1):
            rows = slice((k - 1) * N, k * N)
            nxt = slice(k * N, (k + 1) * N)
            B[rows] = PT[k - 1] @ B[nxt]
            B[rows, nxt] += dt * PT[k - 1]
            BT[rows] = PT[k - 1] @ BT[nxt]
        self.F, self.G0, self.B, self.BT = F, G0, B, BT
        nb = mesh.n_bulk
        reg = problem.regions

        def block_mask(mask):
            m = np.zeros(N)
            m[:nb] = mask
            return np.tile(m, M + 1)

        self.mask = {name: block_mask(r.mask) for name, r in reg.items()}

    def level(self, vec, k):
        return vec[k * self.N:(k + 1) * self.N]

    def cascade(self, problem, Z_T):
        """Direct solve of the adjoint cascade; returns ``z`` at all levels."""
        (a1, a2), (m1, m2) = problem.alphas, problem.mus
        C = -(a1 / m1) * self.mask["omega1"] - (a2 / m2) * self.mask["omega2"]
        T = self.B @ (self.mask["omega_d"][:, None] * (self.F * C[None, :]))
        rhs = self.BT @ Z_T
        return np.linalg.solve(np.eye(T.shape[0]) - T, rhs)

    def optimality(self, problem, f_full, Y0, targets):
        """Direct solve of the state / follower-adjoint system; returns ``y``."""
        size = (self.M + 1) * self.N
        nb = problem.mesh.n_bulk
        (a1, a2), (m1, m2) = problem.alphas, problem.mus
        md = self.mask["omega_d"]
        C = (a1 / m1) * self.mask["omega1"] + (a2 / m2) * self.mask["omega2"]
        Aop = np.eye(size) + self.F @ (C[:, None] * (self.B * md[None, :]))
        rhs = self.G0 @ Y0 + self.F @ (self.mask["omega"] * f_full)
        for a, m, t, key in ((a1, m1, targets[0], "omega1"), (a2, m2, targets[1], "omega2")):
            tf = _pad_levels(t, self.N, nb)
            rhs += (a / m) * self.F @ (self.mask[key] * (self.B @ (md * tf)))
        return np.linalg.solve(Aop, rhs)

    def gramian(self, problem):
        """Dense ``Lambda`` from the direct cascade and optimality solves."""
        N = self.N
        out = np.zeros((N, N))
        zero_t = (problem.zeros_control(), problem.zeros_control())
        for j in range(N):
            e = np.zeros(N)
            e[j] = 1.0
            z = self.cascade(problem, e)
            f = z.copy()
            f[self.M * N:] = 0.0
            y = self.optimality(problem, f, np.zeros(N), zero_t)
            out[:, j] = self.level(y, self.M)
        return out


def _pad_levels(bulk_field, N, nb):
    out = np.zeros((bulk_field.shape[0], N))
    out[:, :nb] = bulk_field
    return out.ravel()


def dense_R(problem):
    """Matrix of the Nash operator on the active control unknowns.

    Returns
    -------
    R : ndarray
        Columns ``apply_R`` of unit vectors, rows restricted to active unknowns.
    index : list of ndarray
        Active masks of the two followers.
    weights : ndarray
        Control quadrature weight of each active unknown.
    """
    masks = [_active(problem, 1), _active(problem, 2)]
    cw = problem.timegrid.control_weights[:, None] * problem.mesh.bulk_weights[None, :]
    n1, n2 = int(masks[0].sum()), int(masks[1].sum())
    n = n1 + n2
    R = np.zeros((n, n))
    z = problem.zeros_control()
    for j in range(n):
        v1, v2 = z.copy(), z.copy()
        if j < n1:
            v1[masks[0]] = np.eye(n1)[j]
        else:
            v2[masks[1]] = np.eye(n2)[j - n1]
        r1, r2 = apply_R(problem, v1, v2)
        R[:, j] = np.concatenate([r1[masks[0]], r2[masks[1]]])
    weights = np.concatenate([cw[masks[0]], cw[masks[1]]])
    return R, masks, weights


@dataclass
class OracleCheck:
    name: str
    value: float
    tol: float
    kind: str = "max"  # "max": value <= tol, "min": value >= tol

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.value):
            return False
        return bool(self.value <= self.tol if self.kind == "max" else self.value >= self.tol)

    def to_dict(self):
        return {"value": self.value, "tol": self.tol, "kind": self.kind, "passed": self.passed}


def run_oracles(problem, f=None, seed=0) -> dict:
    """Run the dense-versus-iterative suite.

    Parameters
    ----------
    problem : ControlProblem
        Tiny problem (a few hundred space-time unknowns at most).
    f : ndarray, optional
        Leader control for the Nash comparison.
    seed : int
        Seed of the random data.

    Returns
    -------
    dict
        ``checks`` (name to value/tolerance/passed), ``passed`` and diagnostic
        extras (threshold report, Gramian spectrum bounds).
    """
    rng = np.random.default_rng(seed)
    mesh, tg, integ = problem.mesh, problem.timegrid, problem.integrator
    N, M = mesh.size, tg.M
    ds = DenseSpaceTime(problem)
    checks = []

    # forward / backward solvers against explicit matrices
    Y0 = rng.standard_normal(N)
    S = rng.standard_normal((M + 1, N))
    Yi = integ.forward(Y0, S).values.ravel()
    checks.append(OracleCheck("forward_dense_vs_iterative", _rel(Yi, ds.G0 @ Y0 + ds.F @ S.ravel()), ORACLE_TOL))
    ZT = rng.standard_normal(N)
    G = rng.standard_normal((M + 1, N))
    Zi = integ.backward(ZT, G).values.ravel()
    checks.append(OracleCheck("backward_dense_vs_iterative", _rel(Zi, ds.BT @ ZT + ds.B @ G.ravel()), ORACLE_TOL))

    # adjoint cascade: Picard against direct solve
    casc = cascade_solve(problem, ZT)
    z_dense = ds.cascade(problem, ZT)
    checks.append(OracleCheck("cascade_dense_vs_picard", _rel(casc.Z.values.ravel(), z_dense), ORACLE_TOL))

    # duality identity at random data
    targets = tuple(rng.standard_normal(problem.control_shape()) for _ in range(2))
    fr = rng.standard_normal(problem.control_shape())
    fz = extract_control(problem, fr)
    opt = optimality_solve(problem, fz, Y0, targets)
    y_dense = ds.optimality(problem, _pad_levels(fz, N, mesh.n_bulk), Y0, targets)
    checks.append(OracleCheck("optimality_dense_vs_picard", _rel(opt.Y.values.ravel(), y_dense), ORACLE_TOL))
    casc_t = cascade_solve(problem.with_data(targets=targets), ZT)
    dual = duality_terms(opt.Y, casc_t.Z, fz, casc_t.psis, targets, problem.alphas, problem.regions)
    checks.append(OracleCheck("duality_relative_residual", abs(dual["residual"]) / dual["scale"], 1e-10))

    # Gramian
    L_iter = dense_gramian(problem)
    L_dense = ds.gramian(problem)
    checks.append(OracleCheck("gramian_dense_vs_iterative", _rel(L_iter, L_dense), ORACLE_TOL))
    sw = np.sqrt(mesh.weights)
    Lt = sw[:, None] * L_iter / sw[None, :]
    asym = float(np.linalg.norm(Lt - Lt.T) / np.linalg.norm(Lt))
    ev = np.linalg.eigvalsh(0.5 * (Lt + Lt.T))
    checks.append(OracleCheck("gramian_asymmetry", asym, 1e-10))
    checks.append(OracleCheck("gramian_min_eigenvalue", float(ev[0]), -1e-12, kind="min"))

    # Nash: dense R direct solve against CG
    R, masks, cw = dense_R(problem)
    (r1, r2), _ = nash_rhs(problem, f)
    rhs = np.concatenate([r1[masks[0]], r2[masks[1]]])
    v_direct = sla.solve(R, rhs)
    sol = nash_solve(problem, f, tol=1e-13, thresholds=False)
    v_cg = np.concatenate([sol.v1[masks[0]], sol.v2[masks[1]]])
    checks.append(OracleCheck("nash_direct_vs_cg", _rel(v_cg, v_direct), ORACLE_TOL))
    sq = np.sqrt(cw)
    Rt = sq[:, None] * R / sq[None, :]
    sym_min = float(np.linalg.eigvalsh(0.5 * (Rt + Rt.T))[0])

    # follower operator norms: power iteration against dense SVD
    norms = {}
    for i in (1, 2):
        mask = masks[i - 1]
        cols = []
        for j in range(int(mask.sum())):
            v = problem.zeros_control()
            v[mask] = np.eye(int(mask.sum()))[j]
            y = integ.forward(None, problem.regions.follower(i).apply(v)).bulk
            cols.append(problem.regions.omega_d.apply(y).ravel())
        Lmat = np.array(cols).T
        ow = (tg.state_weights[:, None] * mesh.bulk_weights[None, :]).ravel()
        cwi = (tg.control_weights[:, None] * mesh.bulk_weights[None, :])[mask]
        Ln = np.sqrt(ow)[:, None] * Lmat / np.sqrt(cwi)[None, :]
        smax = float(np.linalg.svd(Ln, compute_uv=False)[0] ** 2)
        est = elli_norm_sq(problem, i, n_iter=30)
        norms[f"l{i}"] = {"dense": smax, "power_iteration": est}
        checks.append(OracleCheck(f"elli{i}_norm_power_vs_svd", abs(est - smax) / smax, 1e-6))

    (a1, a2), (m1, m2) = problem.alphas, problem.mus
    thresholds_hold = 4 * m1 > a2 * norms["l1"]["dense"] and 4 * m2 > a1 * norms["l2"]["dense"]
    if thresholds_hold:
        checks.append(OracleCheck("nash_symmetric_part_min_eigenvalue", sym_min, np.finfo(float).tiny, kind="min"))

    result = {c.name: c.to_dict() for c in checks}
    return {
        "checks": result,
        "passed": bool(all(c.passed for c in checks)),
        "thresholds_hold": bool(thresholds_hold),
        "nash_symmetric_part_min_eigenvalue": sym_min,
        "gramian_eigenvalue_range": [float(ev[0]), float(ev[-1])],
        "operator_norms": norms,
        "unknowns": {"space": N, "levels": M + 1},
    }
