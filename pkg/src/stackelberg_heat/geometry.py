"""Meshes for the bulk domain and its boundary, discrete measures and stencils.

Two geometries are supported: the interval ``(0, L)`` whose boundary is the
two endpoints, and the disk of radius ``R`` discretized on a polar grid whose
boundary is the outer circle.  Every state is a pair ``(y, y_Gamma)`` of bulk
and boundary nodal values; the discrete L^2 x L^2 inner product uses diagonal
(lumped) quadrature weights.

Besides coordinates and weights, a :class:`Mesh` stores the conductance graph
used to assemble the diffusion operators: bulk edges, bulk-to-boundary
coupling edges and boundary (tangential) edges, each with a purely geometric
factor that is later multiplied by the sampled diffusion coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractViolation

__all__ = [
    "Mesh",
    "PairField",
    "Region",
    "RegionSet",
    "build_interval_mesh",
    "build_disk_mesh",
    "inner_product",
    "norm",
    "region_mask",
    "build_regions",
    "gradient_matrices",
    "tangential_gradient_matrix",
    "tangential_laplacian",
    "conormal_stencil",
]

_MEMBERSHIP_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Mesh:
    """Bulk and boundary nodes with quadrature weights and a conductance graph.

    Attributes
    ----------
    kind : {"interval", "disk"}
    bulk_nodes : ndarray, shape (n_bulk, dim)
    boundary_nodes : ndarray, shape (n_boundary, dim)
    normals : ndarray, shape (n_boundary, dim)
        Outward unit normals at the boundary nodes.
    bulk_weights, boundary_weights : ndarray
        Quadrature weights for integrals over the domain and its boundary.
    h : float
        Bulk spacing (radial spacing for the disk).
    h_gamma : float or None
        Boundary arc-length spacing (disk only).
    trace_index : ndarray of int
        For each boundary node, the bulk node at the same location.
    bulk_edges, bulk_edge_geom : ndarray
        Bulk conductance graph: node pairs and geometric factors.
    coupling_geom : ndarray
        Geometric factor of the edge between ``trace_index[k]`` and boundary
        node ``k``.
    boundary_edges, boundary_edge_geom : ndarray
        Tangential conductance graph on the boundary (empty in 1D).
    params : dict
        Construction parameters (``length`` or ``n_r``, ``n_t``, ``radius``).
    """

    kind: str
    bulk_nodes: np.ndarray
    boundary_nodes: np.ndarray
    normals: np.ndarray
    bulk_weights: np.ndarray
    boundary_weights: np.ndarray
    h: float
    h_gamma: float | None
    trace_index: np.ndarray
    bulk_edges: np.ndarray
    bulk_edge_geom: np.ndarray
    coupling_geom: np.ndarray
    boundary_edges: np.ndarray
    boundary_edge_geom: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.bulk_nodes.shape[1]

    @property
    def n_bulk(self) -> int:
        return self.bulk_nodes.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary_nodes.shape[0]

    @property
    def size(self) -> int:
        """Number of stacked unknowns ``n_bulk + n_boundary``."""
        return self.n_bulk + self.n_boundary

    @property
    def weights(self) -> np.ndarray:
        """Stacked quadrature weights ``(bulk_weights, boundary_weights)``."""
        return np.concatenate([self.bulk_weights, self.boundary_weights])

    @property
    def area(self) -> float:
        """Exact measure of the domain."""
        if self.kind == "interval":
            return float(self.params["length"])
        return float(np.pi * self.params["radius"] ** 2)

    def split(self, vec):
        """Split a stacked vector (or array with last axis stacked) into parts."""
        vec = np.asarray(vec)
        if vec.shape[-1] != self.size:
            raise ContractViolation(
                f"stacked field has length {vec.shape[-1]}, mesh expects {self.size}"
            )
        return vec[..., : self.n_bulk], vec[..., self.n_bulk :]

    def stack(self, bulk, boundary):
        bulk = np.asarray(bulk, dtype=float)
        boundary = np.asarray(boundary, dtype=float)
        if bulk.shape[-1] != self.n_bulk or boundary.shape[-1] != self.n_boundary:
            raise ContractViolation("field parts do not match the mesh")
        return np.concatenate([bulk, boundary], axis=-1)

    def coordinates(self, which="bulk"):
        """Identifier bindings (x, y, r, th) for expression evaluation."""
        pts = self.bulk_nodes if which == "bulk" else self.boundary_nodes
        x = pts[:, 0]
        if self.kind == "interval":
            return {"x": x}
        y = pts[:, 1]
        r = np.hypot(x, y)
        th = np.mod(np.arctan2(y, x), 2 * np.pi)
        return {"x": x, "y": y, "r": r, "th": th}

    def to_dict(self) -> dict:
        """JSON-serializable summary (coordinates, weights, normals)."""
        out = {
            "kind": self.kind,
            "params": dict(self.params),
            "h": self.h,
            "h_gamma": self.h_gamma,
            "bulk_nodes": self.bulk_nodes.tolist(),
            "bulk_weights": self.bulk_weights.tolist(),
            "boundary_nodes": self.boundary_nodes.tolist(),
            "boundary_weights": self.boundary_weights.tolist(),
            "normals": self.normals.tolist(),
            "trace_index": self.trace_index.tolist(),
        }
        return out


@dataclass
class PairField:
    """A discrete element of L^2(Omega) x L^2(Gamma)."""

    bulk: np.ndarray
    boundary: np.ndarray

    def __post_init__(self):
        self.bulk = np.asarray(self.bulk, dtype=float)
        self.boundary = np.asarray(self.boundary, dtype=float)

    @classmethod
    def zeros(cls, mesh: Mesh) -> "PairField":
        return cls(np.zeros(mesh.n_bulk), np.zeros(mesh.n_boundary))

    @classmethod
    def from_stacked(cls, vec, mesh: Mesh) -> "PairField":
        b, g = mesh.split(vec)
        return cls(b.copy(), g.copy())

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.bulk, self.boundary])

    def conforms(self, mesh: Mesh) -> bool:
        return self.bulk.shape == (mesh.n_bulk,) and self.boundary.shape == (
            mesh.n_boundary,
        )

    def __add__(self, other):
        return PairField(self.bulk + other.bulk, self.boundary + other.boundary)

    def __sub__(self, other):
        return PairField(self.bulk - other.bulk, self.boundary - other.boundary)

    def __mul__(self, c):
        return PairField(c * self.bulk, c * self.boundary)

    __rmul__ = __mul__


def _as_stacked(u, mesh):
    if isinstance(u, PairField):
        if not u.conforms(mesh):
            raise ContractViolation("PairField does not conform to the mesh")
        return u.stacked()
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != mesh.size:
        raise ContractViolation(
            f"stacked field has length {u.shape[-1]}, mesh expects {mesh.size}"
        )
    return u


def inner_product(u, v, mesh: Mesh) -> float:
    """Discrete L^2(Omega) x L^2(Gamma) inner product.

    Parameters
    ----------
    u, v : PairField or ndarray
        Fields as :class:`PairField` or stacked vectors of length ``mesh.size``.
    mesh : Mesh

    Returns
    -------
    float
        ``sum(bulk_weights * u * v) + sum(boundary_weights * u_G * v_G)``.
    """
    a = _as_stacked(u, mesh)
    b = _as_stacked(v, mesh)
    if a.shape != b.shape:
        raise ContractViolation("fields have different shapes")
    return float(np.dot(mesh.weights * a, b))


def norm(u, mesh: Mesh) -> float:
    return float(np.sqrt(max(inner_product(u, u, mesh), 0.0)))


# ---------------------------------------------------------------------------
# Mesh construction
# ---------------------------------------------------------------------------


def build_interval_mesh(n: int, length: float = 1.0) -> Mesh:
    """Uniform grid on ``[0, length]`` with trapezoid weights.

    Parameters
    ----------
    n : int
        Number of bulk nodes, including the two endpoints (``n >= 4``).
    length : float
        Interval length.

    Returns
    -------
    Mesh
        Bulk nodes ``x_i = i*h``, boundary nodes at both endpoints with
        normals ``-1`` and ``+1`` and unit boundary weights.
    """
    if int(n) != n or n < 4:
        raise ConfigError(f"interval mesh needs n >= 4 nodes, got {n}")
    if not (length > 0 and np.isfinite(length)):
        raise ConfigError(f"interval length must be positive, got {length}")
    n = int(n)
    h = length / (n - 1)
    x = np.arange(n) * h
    x[-1] = length
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return Mesh(
        kind="interval",
        bulk_nodes=x[:, None],
        boundary_nodes=np.array([[0.0], [float(length)]]),
        normals=np.array([[-1.0], [1.0]]),
        bulk_weights=w,
        boundary_weights=np.ones(2),
        h=h,
        h_gamma=None,
        trace_index=np.array([0, n - 1]),
        bulk_edges=edges,
        bulk_edge_geom=np.full(n - 1, 1.0 / h),
        coupling_geom=np.full(2, 2.0 / h),
        boundary_edges=np.zeros((0, 2), dtype=int),
        boundary_edge_geom=np.zeros(0),
        params={"n": n, "length": float(length)},
    )


def _disk_index(j, k, n_t):
    """Bulk index of ring ``j >= 1``, angle ``k`` (index 0 is the center)."""
    return 1 + (j - 1) * n_t + (k % n_t)


def build_disk_mesh(n_r: int, n_t: int, radius: float = 1.0) -> Mesh:
    """Polar grid on the disk of given radius.

    The bulk nodes are the center plus ``n_r - 1`` rings at radii
    ``r_j = j*h`` with ``h = radius/(n_r - 1)``; the outer ring lies on the
    circle and coincides with the boundary loop.  Each bulk node owns a
    control-volume cell (disk of radius ``h/2`` at the center, annular
    sectors elsewhere), so the bulk weights sum to ``pi*radius^2`` exactly up
    to rounding.

    Parameters
    ----------
    n_r : int
        Radial node count including the center (``>= 3``).
    n_t : int
        Angular node count (even, ``>= 8``).
    radius : float
    """
    if int(n_r) != n_r or n_r < 3:
        raise ConfigError(f"disk mesh needs n_r >= 3, got {n_r}")
    if int(n_t) != n_t or n_t < 8:
        raise ConfigError(f"disk mesh needs n_t >= 8, got {n_t}")
    if n_t % 2:
        raise ConfigError(f"disk mesh needs an even angular count, got n_t={n_t}")
    if not (radius > 0 and np.isfinite(radius)):
        raise ConfigError(f"disk radius must be positive, got {radius}")
    n_r, n_t, R = int(n_r), int(n_t), float(radius)
    h = R / (n_r - 1)
    dth = 2 * np.pi / n_t
    th = np.arange(n_t) * dth
    rings = np.arange(1, n_r) * h
    rings[-1] = R

    pts = [np.zeros((1, 2))]
    w = [np.array([np.pi * (h / 2) ** 2])]
    for j, r in enumerate(rings, start=1):
        pts.append(np.column_stack([r * np.cos(th), r * np.sin(th)]))
        if j < n_r - 1:
            cell = r * h * dth
        else:
            cell = 0.5 * (R**2 - (R - h / 2) ** 2) * dth
        w.append(np.full(n_t, cell))
    bulk_nodes = np.vstack(pts)
    bulk_weights = np.concatenate(w)

    edges, geom = [], []
    # center spokes: face of the center cell split evenly among ring-1 nodes
    for k in range(n_t):
        edges.append((0, _disk_index(1, k, n_t)))
        geom.append((h / 2) * dth / h)
    for j in range(1, n_r):
        r = rings[j - 1]
        radial_extent = h if j < n_r - 1 else h / 2
        for k in range(n_t):
            a = _disk_index(j, k, n_t)
            edges.append((a, _disk_index(j, k + 1, n_t)))
            geom.append(radial_extent / (r * dth))
            if j < n_r - 1:
                edges.append((a, _disk_index(j + 1, k, n_t)))
                geom.append((r + h / 2) * dth / h)

    h_gamma = R * dth
    outer = np.array([_disk_index(n_r - 1, k, n_t) for k in range(n_t)])
    bedges = np.column_stack([np.arange(n_t), (np.arange(n_t) + 1) % n_t])
    return Mesh(
        kind="disk",
        bulk_nodes=bulk_nodes,
        boundary_nodes=bulk_nodes[outer].copy(),
        normals=np.column_stack([np.cos(th), np.sin(th)]),
        bulk_weights=bulk_weights,
        boundary_weights=np.full(n_t, h_gamma),
        h=h,
        h_gamma=h_gamma,
        trace_index=outer,
        bulk_edges=np.array(edges, dtype=int),
        bulk_edge_geom=np.array(geom),
        coupling_geom=np.full(n_t, 2.0 / h * h_gamma),
        boundary_edges=bedges,
        boundary_edge_geom=np.full(n_t, 1.0 / h_gamma),
        params={"n_r": n_r, "n_t": n_t, "radius": R},
    )


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Region:
    """Bulk node mask of a control or observation set.

    ``weights`` are the bulk quadrature weights restricted to the mask, so
    ``weights.sum()`` is the discrete measure of the region.
    """

    name: str
    mask: np.ndarray
    weights: np.ndarray
    spec: object = None

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def measure(self) -> float:
        return float(self.weights.sum())

    def apply(self, bulk_values):
        """Multiply bulk values (last axis) by the indicator of the region."""
        return np.where(self.mask, bulk_values, 0.0)


def _interval_bounds(spec, name):
    try:
        a, b = (float(v) for v in spec)
    except (TypeError, ValueError):
        raise ConfigError(f"region {name} must be a pair [a, b], got {spec!r}")
    if not a <= b:
        raise ConfigError(f"region {name} has a > b: [{a}, {b}]")
    return a, b


def region_mask(mesh: Mesh, spec, name="region") -> np.ndarray:
    """Boolean mask of bulk nodes lying in the closed set described by ``spec``.

    Interval meshes take ``[a, b]``.  Disk meshes take a mapping with keys
    ``r`` (radial range, default ``[0, radius]``) and ``th`` (angular range in
    radians, default the full circle; ``th[0] > th[1]`` wraps through 0).
    """
    tol = _MEMBERSHIP_TOL * max(1.0, mesh.h)
    if mesh.kind == "interval":
        a, b = _interval_bounds(spec, name)
        x = mesh.bulk_nodes[:, 0]
        return (x >= a - tol) & (x <= b + tol)
    if not isinstance(spec, dict):
        raise ConfigError(f"disk region {name} must be a table with keys r, th")
    unknown = set(spec) - {"r", "th"}
    if unknown:
        raise ConfigError(f"disk region {name} has unknown keys {sorted(unknown)}")
    r0, r1 = _interval_bounds(spec.get("r", [0.0, mesh.params["radius"]]), name)
    coords = mesh.coordinates("bulk")
    r, th = coords["r"], coords["th"]
    inside = (r >= r0 - tol) & (r <= r1 + tol)
    if "th" in spec:
        t0, t1 = (float(v) for v in spec["th"])
        full = abs(t1 - t0) >= 2 * np.pi - 1e-12
        if not full:
            t0, t1 = np.mod(t0, 2 * np.pi), np.mod(t1, 2 * np.pi)
            if t0 <= t1:
                ang = (th >= t0 - tol) & (th <= t1 + tol)
            else:
                ang = (th >= t0 - tol) | (th <= t1 + tol)
            # the center has no angle: it belongs whenever r0 == 0
            ang = ang | (r <= tol)
            inside &= ang
    return inside


@dataclass(frozen=True, eq=False)
class RegionSet:
    """The five regions of the control problem.

    ``omega`` carries the leader control, ``omega1`` and ``omega2`` the
    follower controls, ``omega_d`` is the common tracking set of both
    followers, ``omega_prime`` the observation set of the Carleman weights.
    """

    omega: Region
    omega1: Region
    omega2: Region
    omega_d: Region
    omega_prime: Region

    def follower(self, i: int) -> Region:
        return {1: self.omega1, 2: self.omega2}[i]

    def items(self):
        return [
            ("omega", self.omega),
            ("omega1", self.omega1),
            ("omega2", self.omega2),
            ("omega_d", self.omega_d),
            ("omega_prime", self.omega_prime),
        ]

    def to_dict(self) -> dict:
        return {name: reg.indices.tolist() for name, reg in self.items()}


def build_regions(mesh: Mesh, specs: dict) -> RegionSet:
    """Convert region descriptions into node masks and validate them.

    Parameters
    ----------
    mesh : Mesh
    specs : dict
        Keys ``omega``, ``omega1``, ``omega2``, ``omega_d``, ``omega_prime``.

    Raises
    ------
    ConfigError
        If a region is missing or empty, or if ``omega_prime`` is not
        contained in ``omega`` intersected with ``omega_d``.
    """
    names = ("omega", "omega1", "omega2", "omega_d", "omega_prime")
    regions = {}
    for name in names:
        if name not in specs:
            raise ConfigError(f"missing region {name}")
        mask = region_mask(mesh, specs[name], name)
        if not mask.any():
            raise ConfigError(f"region {name} contains no mesh node")
        regions[name] = Region(name, mask, mesh.bulk_weights * mask, specs[name])
    rs = RegionSet(**regions)
    outside = rs.omega_prime.mask & ~(rs.omega.mask & rs.omega_d.mask)
    if outside.any():
        raise ConfigError(
            "observation-set inclusion assumption violated: omega_prime must be contained in omega ∩ omega_d "
            f"({int(outside.sum())} node(s) of omega_prime lie outside)"
        )
    return rs


# ---------------------------------------------------------------------------
# Stencils
# ---------------------------------------------------------------------------


def gradient_matrices(mesh: Mesh):
    """Cartesian gradient components of bulk nodal values.

    Second order in the interior and one-sided second order at the ends of
    the interval / on the outer ring of the disk.  At the disk center the
    gradient is the least-squares slope of the first ring.

    Returns
    -------
    list of scipy.sparse.csr_matrix
        ``dim`` matrices of shape ``(n_bulk, n_bulk)``.
    """
    if mesh.kind == "interval":
        n, h = mesh.n_bulk, mesh.h
        D = sp.lil_matrix((n, n))
        D[0, [0, 1, 2]] = np.array([-3.0, 4.0, -1.0]) / (2 * h)
        D[n - 1, [n - 1, n - 2, n - 3]] = np.array([3.0, -4.0, 1.0]) / (2 * h)
        for i in range(1, n - 1):
            D[i, i - 1] = -1 / (2 * h)
            D[i, i + 1] = 1 / (2 * h)
        return [D.tocsr()]

    n_r, n_t = mesh.params["n_r"], mesh.params["n_t"]
    h = mesh.h
    dth = 2 * np.pi / n_t
    th = np.arange(n_t) * dth
    N = mesh.n_bulk
    Dr = sp.lil_matrix((N, N))
    Dt = sp.lil_matrix((N, N))  # (1/r) d/dth
    for j in range(1, n_r):
        r = mesh.bulk_nodes[_disk_index(j, 0, n_t), 0]
        for k in range(n_t):
            a = _disk_index(j, k, n_t)
            inner1 = 0 if j == 1 else _disk_index(j - 1, k, n_t)
            if j < n_r - 1:
                Dr[a, _disk_index(j + 1, k, n_t)] += 1 / (2 * h)
                Dr[a, inner1] -= 1 / (2 * h)
            else:
                inner2 = 0 if j - 2 == 0 else _disk_index(j - 2, k, n_t)
                Dr[a, a] += 3 / (2 * h)
                Dr[a, inner1] -= 4 / (2 * h)
                Dr[a, inner2] += 1 / (2 * h)
            Dt[a, _disk_index(j, k + 1, n_t)] += 1 / (2 * dth * r)
            Dt[a, _disk_index(j, k - 1, n_t)] -= 1 / (2 * dth * r)
    cos_t = np.concatenate([[0.0], np.tile(np.cos(th), n_r - 1)])
    sin_t = np.concatenate([[0.0], np.tile(np.sin(th), n_r - 1)])
    Gx = sp.diags(cos_t) @ Dr.tocsr() - sp.diags(sin_t) @ Dt.tocsr()
    Gy = sp.diags(sin_t) @ Dr.tocsr() + sp.diags(cos_t) @ Dt.tocsr()
    Gx, Gy = Gx.tolil(), Gy.tolil()
    ring1 = [_disk_index(1, k, n_t) for k in range(n_t)]
    Gx[0, ring1] = 2 * np.cos(th) / (n_t * h)
    Gy[0, ring1] = 2 * np.sin(th) / (n_t * h)
    return [Gx.tocsr(), Gy.tocsr()]


def tangential_gradient_matrix(mesh: Mesh):
    """Tangential derivative of boundary values (zero matrix in 1D)."""
    ng = mesh.n_boundary
    if mesh.kind == "interval":
        return sp.csr_matrix((ng, ng))
    hg = mesh.h_gamma
    k = np.arange(ng)
    rows = np.concatenate([k, k])
    cols = np.concatenate([(k + 1) % ng, (k - 1) % ng])
    vals = np.concatenate([np.full(ng, 1 / (2 * hg)), np.full(ng, -1 / (2 * hg))])
    return sp.csr_matrix((vals, (rows, cols)), shape=(ng, ng))


def tangential_laplacian(mesh: Mesh, conductance=None):
    """Laplace-Beltrami matrix on the boundary loop.

    ``Delta_G = -W_G^{-1} S_G`` with ``S_G`` the symmetric graph Laplacian of
    the boundary edges; self-adjoint for the boundary weights, negative
    semidefinite, with the constants as kernel.  Zero in 1D.

    Parameters
    ----------
    conductance : ndarray, optional
        Per-edge multiplier (diffusion coefficient); defaults to 1.
    """
    ng = mesh.n_boundary
    if mesh.kind == "interval":
        return sp.csr_matrix((ng, ng))
    g = mesh.boundary_edge_geom.copy()
    if conductance is not None:
        g = g * conductance
    S = _graph_laplacian(mesh.boundary_edges, g, ng)
    return (sp.diags(1.0 / mesh.boundary_weights) @ -S).tocsr()


def _graph_laplacian(edges, cond, n):
    i, j = edges[:, 0], edges[:, 1]
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([cond, cond, -cond, -cond])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def conormal_stencil(mesh: Mesh):
    """Outward normal derivative at boundary nodes from bulk values.

    One-sided second-order three-point stencil along the normal line.

    Returns
    -------
    scipy.sparse.csr_matrix, shape (n_boundary, n_bulk)
    """
    ng, nb, h = mesh.n_boundary, mesh.n_bulk, mesh.h
    D = sp.lil_matrix((ng, nb))
    if mesh.kind == "interval":
        D[0, [0, 1, 2]] = np.array([3.0, -4.0, 1.0]) / (2 * h)
        D[1, [nb - 1, nb - 2, nb - 3]] = np.array([3.0, -4.0, 1.0]) / (2 * h)
        return D.tocsr()
    n_r, n_t = mesh.params["n_r"], mesh.params["n_t"]
    for k in range(n_t):
        line = [_disk_index(j, k, n_t) if j > 0 else 0 for j in (n_r - 1, n_r - 2, n_r - 3)]
        D[k, line[0]] += 3 / (2 * h)
        D[k, line[1]] += -4 / (2 * h)
        D[k, line[2]] += 1 / (2 * h)
    return D.tocsr()
