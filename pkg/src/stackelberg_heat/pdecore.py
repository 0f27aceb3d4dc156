"""Generator assembly and theta-scheme integrators with exact discrete adjoints.

The semidiscrete system is ``Y' = K(t) Y + S(t)`` on stacked bulk/boundary
coordinates.  The diffusion part of ``K`` is ``-W^{-1} S_c`` where ``W`` is the
diagonal matrix of quadrature weights and ``S_c`` the symmetric graph
Laplacian of the conductance graph (bulk edges, bulk-to-boundary coupling
edges, tangential boundary edges).  Consequently ``w^T K = 0`` when the lower
order terms vanish, the diffusion block is self-adjoint for the weighted
inner product, and implicit steps are M-matrices.

Time stepping (``A_k = I - theta*dt*K_k``, ``B_k = I + (1-theta)*dt*K_k``)::

    forward:   Y_{k+1} = A_{k+1}^{-1} B_k (Y_k + dt*S_k),           k = 0..M-1
    backward:  Z_M = Z_T,
               Z_{k-1} = B_{k-1}^* A_k^{-*} (Z_k + dt*G_k),          k = M..1

where ``^*`` is the adjoint for the weighted inner product.  These satisfy
the exact identity

    <Y_M, Z_T> + sum_{k=1}^{M} dt <Y_k, G_k> = <Y_0, Z_0> + sum_{k=0}^{M-1} dt <S_k, Z_k>

so sources are paired with the left time rule (:func:`control_pairing`) and
observations with the right time rule (:func:`state_pairing`).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, ContractViolation, SingularStepError
from .geometry import (
    Mesh,
    PairField,
    gradient_matrices,
    tangential_gradient_matrix,
    _graph_laplacian,
)

__all__ = [
    "TimeGrid",
    "BlockOperator",
    "Trajectory",
    "ThetaIntegrator",
    "assemble_generator",
    "forward_solve",
    "backward_solve",
    "control_pairing",
    "state_pairing",
    "duality_terms",
    "duality_residual",
    "dense_generator",
    "DENSE_ORACLE_LIMIT",
]

DENSE_ORACLE_LIMIT = 64
_DENSE_STEP_LIMIT = 600


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid ``t_k = k*T/M`` with theta-scheme parameter."""

    T: float
    M: int
    theta: float = 1.0

    def __post_init__(self):
        if not (self.T > 0 and np.isfinite(self.T)):
            raise ConfigError(f"time horizon T must be positive, got {self.T}")
        if int(self.M) != self.M or self.M < 1:
            raise ConfigError(f"number of steps M must be a positive integer, got {self.M}")
        if not 0.5 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [1/2, 1], got {self.theta}")
        object.__setattr__(self, "M", int(self.M))

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.M + 1) * self.dt
        t[-1] = self.T
        return t

    @property
    def control_weights(self) -> np.ndarray:
        """Left-rule time weights (``dt`` at levels ``0..M-1``, 0 at ``M``)."""
        w = np.full(self.M + 1, self.dt)
        w[-1] = 0.0
        return w

    @property
    def state_weights(self) -> np.ndarray:
        """Right-rule time weights (0 at level 0, ``dt`` at ``1..M``)."""
        w = np.full(self.M + 1, self.dt)
        w[0] = 0.0
        return w

    @property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.M + 1, self.dt)
        w[0] = w[-1] = self.dt / 2
        return w


def control_pairing(u, v, timegrid: TimeGrid, weights) -> float:
    """Space-time pairing with the left time rule."""
    return float(np.einsum("k,ki,i,ki->", timegrid.control_weights, u, weights, v))


def state_pairing(u, v, timegrid: TimeGrid, weights) -> float:
    """Space-time pairing with the right time rule."""
    return float(np.einsum("k,ki,i,ki->", timegrid.state_weights, u, weights, v))


@dataclass(frozen=True, eq=False)
class BlockOperator:
    """Assembled generator ``K`` on stacked coordinates.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix
        Full generator (diffusion, coupling, drift and potentials).
    diffusion : scipy.sparse.csr_matrix
        Diffusion and bulk-boundary exchange part ``-W^{-1} S_c``.
    weights : ndarray
        Stacked quadrature weights.
    """

    matrix: sp.csr_matrix
    diffusion: sp.csr_matrix
    weights: np.ndarray

    def weighted_adjoint(self) -> sp.csr_matrix:
        """``W^{-1} K^T W``."""
        w = self.weights
        return (sp.diags(1.0 / w) @ self.matrix.T @ sp.diags(w)).tocsr()


@functools.lru_cache(maxsize=32)
def _stencils(mesh: Mesh):
    return gradient_matrices(mesh), tangential_gradient_matrix(mesh)


def _upwind_matrix(mesh: Mesh, drift):
    """First-order upwind discretization of ``-B d/dx`` on the interval."""
    n, h = mesh.n_bulk, mesh.h
    rows, cols, vals = [], [], []
    for i in range(n):
        bi = drift[i]
        if bi > 0 and i > 0:
            rows += [i, i]
            cols += [i, i - 1]
            vals += [-bi / h, bi / h]
        elif bi < 0 and i < n - 1:
            rows += [i, i]
            cols += [i, i + 1]
            vals += [bi / h, -bi / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _stiffness(mesh: Mesh, tables) -> sp.csr_matrix:
    nb, N = mesh.n_bulk, mesh.size
    A = tables.A
    i, j = mesh.bulk_edges[:, 0], mesh.bulk_edges[:, 1]
    cond_bulk = mesh.bulk_edge_geom * 0.5 * (A[i] + A[j])
    edges = [mesh.bulk_edges]
    conds = [cond_bulk]
    tr = mesh.trace_index
    edges.append(np.column_stack([tr, nb + np.arange(mesh.n_boundary)]))
    conds.append(mesh.coupling_geom * A[tr])
    if len(mesh.boundary_edges):
        Ag = tables.A_gamma
        bi, bj = mesh.boundary_edges[:, 0], mesh.boundary_edges[:, 1]
        edges.append(mesh.boundary_edges + nb)
        conds.append(mesh.boundary_edge_geom * 0.5 * (Ag[bi] + Ag[bj]))
    return _graph_laplacian(np.vstack(edges), np.concatenate(conds), N)


def assemble_generator(mesh: Mesh, coeffs, level: int, upwind: bool = False) -> BlockOperator:
    """Assemble the generator ``K`` at one time level.

    Bulk rows discretize ``div(A grad y) - B.grad y - a y``; boundary rows
    discretize ``-d_nu^A y + div_G(A_G grad_G y_G) - B_G.grad_G y_G - b y_G``.
    The co-normal flux is the conductance exchange between each boundary node
    and its coincident bulk node, so constants are steady states and the
    weighted column sums of the diffusion part vanish.

    Parameters
    ----------
    mesh : Mesh
    coeffs : CoefficientTables
    level : int
        Time level index into the sampled tables.
    upwind : bool
        Use first-order upwind drift (interval only) instead of centered.
    """
    if not 0 <= level < coeffs.n_levels:
        raise ContractViolation(f"time level {level} outside the sampled tables")
    w = mesh.weights
    nb = mesh.n_bulk
    diffusion = (sp.diags(-1.0 / w) @ _stiffness(mesh, coeffs)).tocsr()
    grads, tgrad = _stencils(mesh)
    drift = coeffs.B[level]
    if upwind:
        if mesh.kind != "interval":
            raise ConfigError("upwind drift is only available on the interval")
        bulk_drift = _upwind_matrix(mesh, drift[:, 0])
    else:
        bulk_drift = sp.csr_matrix((nb, nb))
        for d, G in enumerate(grads):
            if np.any(drift[:, d]):
                bulk_drift = bulk_drift - sp.diags(drift[:, d]) @ G
    bnd_drift = -sp.diags(coeffs.B_gamma[level]) @ tgrad
    lower = sp.block_diag([bulk_drift, bnd_drift]) - sp.diags(
        np.concatenate([coeffs.a[level], coeffs.b[level]])
    )
    K = (diffusion + lower).tocsr()
    K.eliminate_zeros()
    return BlockOperator(K, diffusion, w)


def dense_generator(mesh: Mesh, coeffs, level: int = 0, upwind: bool = False) -> np.ndarray:
    """Dense generator for oracle computations on tiny meshes.

    Raises
    ------
    ContractViolation
        If the mesh has more than ``DENSE_ORACLE_LIMIT`` unknowns.
    """
    if mesh.size > DENSE_ORACLE_LIMIT:
        raise ContractViolation(
            f"dense oracle limited to {DENSE_ORACLE_LIMIT} unknowns, mesh has {mesh.size}"
        )
    return assemble_generator(mesh, coeffs, level, upwind).matrix.toarray()


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Trajectory:
    """States at all time levels, stored as an ``(M+1, n_bulk+n_boundary)`` array."""

    values: np.ndarray
    mesh: Mesh
    timegrid: TimeGrid

    @property
    def bulk(self) -> np.ndarray:
        return self.values[:, : self.mesh.n_bulk]

    @property
    def boundary(self) -> np.ndarray:
        return self.values[:, self.mesh.n_bulk :]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def level(self, k: int) -> PairField:
        return PairField.from_stacked(self.values[k], self.mesh)

    def __len__(self):
        return self.values.shape[0]

    def csv_rows(self, levels=None):
        """Rows ``(level, time, node_id, kind, value)`` for CSV export."""
        times = self.timegrid.times
        nb = self.mesh.n_bulk
        levels = range(len(self)) if levels is None else levels
        for k in levels:
            for i, val in enumerate(self.values[k]):
                kind = "bulk" if i < nb else "boundary"
                node = i if i < nb else i - nb
                yield (k, times[k], node, kind, val)


# ---------------------------------------------------------------------------
# Integrator
# ---------------------------------------------------------------------------


class _DenseStep:
    """Step map ``P = A^{-1} B`` stored densely (small meshes)."""

    def __init__(self, A, B, level):
        A = A.toarray()
        try:
            lu = sla.lu_factor(A, check_finite=True)
        except (ValueError, sla.LinAlgError) as exc:
            raise SingularStepError(level, str(exc)) from exc
        if np.any(np.diag(lu[0]) == 0):
            raise SingularStepError(level)
        rhs = np.eye(A.shape[0]) if B is None else B.toarray()
        self.P = sla.lu_solve(lu, rhs)
        self.PT = np.ascontiguousarray(self.P.T)

    def apply(self, v):
        return self.P @ v

    def apply_transpose(self, v):
        return self.PT @ v


class _SparseStep:
    def __init__(self, A, B, level):
        try:
            self.lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise SingularStepError(level, str(exc)) from exc
        self.B = B
        self.BT = None if B is None else B.T.tocsr()

    def apply(self, v):
        if self.B is not None:
            v = self.B @ v
        return self.lu.solve(v)

    def apply_transpose(self, v):
        out = self.lu.solve(v, trans="T")
        if self.BT is not None:
            out = self.BT @ out
        return out


class ThetaIntegrator:
    """Forward and exactly-adjoint backward theta-scheme solvers.

    Step matrices are assembled once per distinct coefficient level and
    shared, so repeated solves (Picard sweeps, Krylov iterations) only pay
    for the time loop.

    Parameters
    ----------
    mesh : Mesh
    coeffs : CoefficientTables
    timegrid : TimeGrid
    upwind : bool
        Upwind drift discretization (interval only).
    """

    def __init__(self, mesh: Mesh, coeffs, timegrid: TimeGrid, upwind: bool = False):
        if coeffs.n_levels != timegrid.M + 1:
            raise ContractViolation(
                f"coefficient tables have {coeffs.n_levels} levels, grid needs {timegrid.M + 1}"
            )
        self.mesh = mesh
        self.coeffs = coeffs
        self.timegrid = timegrid
        self.upwind = upwind
        self.weights = mesh.weights
        theta, dt = timegrid.theta, timegrid.dt
        N = mesh.size
        eye = sp.identity(N, format="csr")

        level_id = {}
        self._K = []
        self.level_class = np.empty(timegrid.M + 1, dtype=int)
        for k in range(timegrid.M + 1):
            key = coeffs.level_key(k)
            if key not in level_id:
                level_id[key] = len(self._K)
                self._K.append(assemble_generator(mesh, coeffs, k, upwind).matrix)
            self.level_class[k] = level_id[key]

        dense = N <= _DENSE_STEP_LIMIT
        cache = {}
        self._steps = []
        for k in range(timegrid.M):
            key = (self.level_class[k + 1], self.level_class[k])
            if key not in cache:
                A = (eye - theta * dt * self._K[key[0]]).tocsr()
                B = None if theta == 1.0 else (eye + (1 - theta) * dt * self._K[key[1]]).tocsr()
                cache[key] = (_DenseStep if dense else _SparseStep)(A, B, k + 1)
            self._steps.append(cache[key])

    def generator(self, k: int) -> sp.csr_matrix:
        return self._K[self.level_class[k]]

    def _source_array(self, sources):
        M, N, nb = self.timegrid.M, self.mesh.size, self.mesh.n_bulk
        if sources is None:
            return None
        if callable(sources):
            return np.array([sources(k) for k in range(M + 1)], dtype=float)
        S = np.asarray(sources, dtype=float)
        if S.shape == (M + 1, nb):
            S = np.concatenate([S, np.zeros((M + 1, N - nb))], axis=1)
        if S.shape != (M + 1, N):
            raise ContractViolation(
                f"sources have shape {S.shape}, expected ({M + 1}, {N}) or ({M + 1}, {nb})"
            )
        return S

    def _initial(self, Y0):
        if Y0 is None:
            return np.zeros(self.mesh.size)
        if isinstance(Y0, PairField):
            Y0 = Y0.stacked()
        Y0 = np.asarray(Y0, dtype=float)
        if Y0.shape != (self.mesh.size,):
            raise ContractViolation(f"state has shape {Y0.shape}, expected ({self.mesh.size},)")
        return Y0

    def forward(self, Y0=None, sources=None) -> Trajectory:
        """Solve ``Y' = K Y + S`` forward from ``Y0``.

        Parameters
        ----------
        Y0 : PairField, ndarray or None
            Initial state (zero if ``None``).
        sources : ndarray, callable or None
            Array of shape ``(M+1, N)`` (stacked) or ``(M+1, n_bulk)``
            (bulk only), or a callable ``k -> stacked vector``.  Level ``M``
            is not used.
        """
        M, dt = self.timegrid.M, self.timegrid.dt
        S = self._source_array(sources)
        Y = np.empty((M + 1, self.mesh.size))
        Y[0] = self._initial(Y0)
        for k in range(M):
            rhs = Y[k] if S is None else Y[k] + dt * S[k]
            Y[k + 1] = self._steps[k].apply(rhs)
        return Trajectory(Y, self.mesh, self.timegrid)

    def backward(self, Z_T=None, sources=None) -> Trajectory:
        """Exact weighted transpose of :meth:`forward`.

        ``sources`` are paired with the right time rule; level 0 is unused.
        """
        M, dt = self.timegrid.M, self.timegrid.dt
        w = self.weights
        G = self._source_array(sources)
        Z = np.empty((M + 1, self.mesh.size))
        Z[M] = self._initial(Z_T)
        for k in range(M, 0, -1):
            v = Z[k] if G is None else Z[k] + dt * G[k]
            Z[k - 1] = self._steps[k - 1].apply_transpose(w * v) / w
        return Trajectory(Z, self.mesh, self.timegrid)

    def with_coefficients(self, coeffs) -> "ThetaIntegrator":
        return ThetaIntegrator(self.mesh, coeffs, self.timegrid, self.upwind)


def forward_solve(Y0, sources, coeffs, timegrid, mesh, upwind=False) -> Trajectory:
    """One-shot forward solve (builds a :class:`ThetaIntegrator`)."""
    return ThetaIntegrator(mesh, coeffs, timegrid, upwind).forward(Y0, sources)


def backward_solve(Z_T, sources, coeffs, timegrid, mesh, upwind=False) -> Trajectory:
    """One-shot backward (adjoint) solve."""
    return ThetaIntegrator(mesh, coeffs, timegrid, upwind).backward(Z_T, sources)


# ---------------------------------------------------------------------------
# Duality identity of the control problem
# ---------------------------------------------------------------------------


def duality_terms(Y, Z, f, psis, targets, alphas, regions) -> dict:
    """The four terms of the state/cascade duality identity.

    Parameters
    ----------
    Y : Trajectory
        State of the optimality system driven by the leader control ``f``.
    Z : Trajectory
        Backward component of the adjoint cascade.
    f : ndarray, shape (M+1, n_bulk)
        Leader control.
    psis : sequence of Trajectory
        Forward cascade components ``psi^1, psi^2``.
    targets : sequence of ndarray, shape (M+1, n_bulk)
        Follower targets ``y_{1,d}, y_{2,d}``.
    alphas : sequence of float
    regions : RegionSet

    Returns
    -------
    dict
        ``terminal = <Y(T), Z(T)>``, ``initial = <Y(0), Z(0)>``,
        ``leader = int_omega f z``, ``targets = sum_i alpha_i int_{omega_d} y_{i,d} psi^i``
        and ``residual = terminal - initial - leader + targets``.
    """
    mesh, tg = Y.mesh, Y.timegrid
    wb = mesh.bulk_weights
    terminal = float(np.dot(mesh.weights * Y.final, Z.final))
    initial = float(np.dot(mesh.weights * Y.initial, Z.initial))
    leader = control_pairing(regions.omega.apply(f), Z.bulk, tg, wb)
    tgt = 0.0
    for alpha, yd, psi in zip(alphas, targets, psis):
        tgt += alpha * state_pairing(regions.omega_d.apply(yd), psi.bulk, tg, wb)
    return {
        "terminal": terminal,
        "initial": initial,
        "leader": leader,
        "targets": tgt,
        "residual": terminal - initial - leader + tgt,
        "scale": abs(terminal) + abs(initial) + abs(leader) + abs(tgt),
    }


def duality_residual(Y, Z, f, psis, targets, alphas, regions) -> float:
    """Absolute residual ``|<Y(T),Z_T> - <Y(0),Z(0)> - int f z + sum alpha_i int y_{i,d} psi^i|``."""
    return abs(duality_terms(Y, Z, f, psis, targets, alphas, regions)["residual"])
