"""Carleman weight functions and empirical observability constants.

The Morse function ``eta`` is positive in the domain, vanishes on the
boundary, has a single critical point inside the observation set ``omega'``
and a strictly negative outward normal derivative.  With ``m = max eta`` the
weights are::

    xi(x,t)    = exp(lam (2m + eta(x))) / (t (T - t))
    alpha(x,t) = (exp(4 lam m) - exp(lam (2m + eta(x)))) / (t (T - t))

and the barred versions replace ``t (T - t)`` by ``l(t)``, equal to ``T^2/4``
on the first half of the horizon.  ``rho(t) = exp(s * max_x alphabar(x,t))``
is finite at ``t = 0`` and blows up as ``t -> T``.

All exponentials are handled in log space; quantities that still exceed the
floating-point range are capped at a sentinel and flagged.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    CriticalPointOutsideOmegaPrime,
    DenominatorUnderflow,
    MultipleCriticalPoints,
    TimeOutOfRange,
)
from .geometry import (
    Mesh,
    Region,
    conormal_stencil,
    gradient_matrices,
    region_mask,
    tangential_gradient_matrix,
)
from .hum import cascade_solve
from .pdecore import Trajectory

__all__ = [
    "MorseFunction",
    "CarlemanWeights",
    "WeightValues",
    "build_morse",
    "eval_weights",
    "weight_bounds_check",
    "carleman_functional",
    "observability_sample",
    "ObservabilityStats",
    "OVERFLOW_SENTINEL",
    "default_sample_grid",
]

logger = logging.getLogger(__name__)

_LOG_MAX = float(np.log(np.finfo(float).max))
OVERFLOW_SENTINEL = 1e300
_LOG_SENTINEL = float(np.log(OVERFLOW_SENTINEL))
SCAN_POINTS = 10_000


def _capped_exp(log_values):
    """``exp`` with values above the sentinel capped; returns ``(values, flag)``."""
    lv = np.asarray(log_values, dtype=float)
    over = lv > _LOG_SENTINEL
    out = np.exp(np.minimum(lv, _LOG_SENTINEL))
    return out, bool(np.any(over))


# ---------------------------------------------------------------------------
# Morse function
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MorseFunction:
    """Nodal values and analytic form of the Morse function.

    Attributes
    ----------
    kind : {"interval", "disk"}
    params : dict
        ``length`` and ``kappa`` (interval, ``eta = x (L - x) exp(kappa x)``)
        or ``radius`` (disk, ``eta = R^2 - r^2``).
    critical_point : float
        Location of the interior critical point (``x`` or ``r``).
    sup : float
        ``max eta`` over the closed domain.
    bulk_values, boundary_values : ndarray
        ``eta`` at bulk and boundary nodes.
    gradient : ndarray, shape (n_bulk, dim)
        Analytic gradient at bulk nodes.
    delta : float
        Minimum of ``|grad eta|`` over bulk nodes outside ``omega'``.
    conormal : ndarray
        Outward normal derivative at the boundary nodes.
    c : float
        ``min(-conormal)``, strictly positive.
    sign_changes : int
        Sign changes of the radial/axial derivative found by the scan.
    """

    kind: str
    params: dict
    critical_point: float
    sup: float
    bulk_values: np.ndarray
    boundary_values: np.ndarray
    gradient: np.ndarray
    delta: float
    conormal: np.ndarray
    c: float
    sign_changes: int

    def eta(self, points) -> np.ndarray:
        """Evaluate ``eta`` at points of shape ``(n,)`` (interval) or ``(n, dim)``."""
        p = np.asarray(points, dtype=float)
        if self.kind == "interval":
            x = p.reshape(-1) if p.ndim <= 1 else p[:, 0]
            L, k = self.params["length"], self.params["kappa"]
            return x * (L - x) * np.exp(k * x)
        r2 = np.sum(np.atleast_2d(p) ** 2, axis=1)
        return self.params["radius"] ** 2 - r2

    def grad(self, points) -> np.ndarray:
        """Analytic gradient, shape ``(n, dim)``."""
        p = np.asarray(points, dtype=float)
        if self.kind == "interval":
            x = p.reshape(-1) if p.ndim <= 1 else p[:, 0]
            L, k = self.params["length"], self.params["kappa"]
            return (np.exp(k * x) * ((L - 2 * x) + k * x * (L - x)))[:, None]
        return -2.0 * np.atleast_2d(p)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": dict(self.params),
            "critical_point": self.critical_point,
            "sup": self.sup,
            "delta": self.delta,
            "c": self.c,
            "sign_changes": self.sign_changes,
        }


def _omega_prime_spec(mesh, omega_prime):
    if isinstance(omega_prime, Region):
        return omega_prime.spec, omega_prime.mask
    return omega_prime, region_mask(mesh, omega_prime, "omega_prime")


def _sign_changes(values):
    s = np.sign(values)
    s = s[s != 0]
    return np.flatnonzero(s[1:] != s[:-1])


def build_morse(mesh: Mesh, omega_prime) -> MorseFunction:
    """Construct and validate the Morse function for ``omega'``.

    Parameters
    ----------
    mesh : Mesh
    omega_prime : Region or region spec
        Observation set.  On the interval the critical point is placed at
        its midpoint; on the disk it must contain the center.

    Raises
    ------
    CriticalPointOutsideOmegaPrime
        The critical point found by the derivative scan is not in ``omega'``.
    MultipleCriticalPoints
        The scan finds more than one sign change of the derivative.
    """
    spec, mask = _omega_prime_spec(mesh, omega_prime)
    if not np.any(mask):
        raise ConfigError("observation region omega_prime is empty")
    if mesh.kind == "interval":
        L = float(mesh.params["length"])
        a, b = float(spec[0]), float(spec[1])
        c = 0.5 * (a + b)
        if not 0 < c < L:
            raise CriticalPointOutsideOmegaPrime(
                f"midpoint {c} of omega_prime is not interior to (0, {L})"
            )
        # d/dx [x (L-x) e^{kx}] = e^{kx} ((L - 2x) + k x (L - x)) vanishes at c
        kappa = (2 * c - L) / (c * (L - c))
        params = {"length": L, "kappa": kappa}
        xs = np.linspace(0.0, L, SCAN_POINTS + 1)
        deriv = (L - 2 * xs) + kappa * xs * (L - xs)
        changes = _sign_changes(deriv)
        if len(changes) > 1:
            raise MultipleCriticalPoints(f"derivative changes sign {len(changes)} times")
        if len(changes) == 0:
            raise CriticalPointOutsideOmegaPrime("no interior critical point found")
        nz = xs[np.sign(deriv) != 0]
        crit = 0.5 * (nz[changes[0]] + nz[changes[0] + 1])
        tol = L / SCAN_POINTS
        if not (a - tol <= crit <= b + tol):
            raise CriticalPointOutsideOmegaPrime(
                f"critical point {crit:.6g} lies outside omega_prime [{a}, {b}]"
            )
        sup = float(c * (L - c) * np.exp(kappa * c))
    elif mesh.kind == "disk":
        R = float(mesh.params["radius"])
        params = {"radius": R}
        if not mask[0]:
            raise CriticalPointOutsideOmegaPrime(
                "omega_prime must contain the disk center, where the radial Morse function is critical"
            )
        rs = np.linspace(0.0, R, SCAN_POINTS + 1)
        changes = _sign_changes(-2 * rs[1:])
        if len(changes) > 0:
            raise MultipleCriticalPoints("radial derivative changes sign away from the center")
        crit, sup = 0.0, R**2
    else:  # pragma: no cover - Mesh validates kind
        raise ConfigError(f"unsupported mesh kind {mesh.kind!r}")

    proto = MorseFunction(mesh.kind, params, float(crit), float(sup),
                          None, None, None, 0.0, None, 0.0, 0)
    bulk = proto.eta(mesh.bulk_nodes)
    bulk[mesh.trace_index] = 0.0
    grad = proto.grad(mesh.bulk_nodes)
    gnorm = np.linalg.norm(grad, axis=1)
    outside = ~mask
    delta = float(gnorm[outside].min()) if outside.any() else float("inf")
    conormal = np.einsum("ij,ij->i", proto.grad(mesh.boundary_nodes), mesh.normals)
    cval = float(np.min(-conormal))
    if not cval > 0:
        raise ConfigError("Morse function normal derivative is not negative on the boundary")
    if not delta > 0:
        raise CriticalPointOutsideOmegaPrime("gradient of the Morse function vanishes outside omega_prime")
    return MorseFunction(
        mesh.kind,
        params,
        float(crit),
        float(sup),
        bulk,
        np.zeros(mesh.n_boundary),
        grad,
        delta,
        conormal,
        cval,
        1 if mesh.kind == "interval" else 0,
    )


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightValues:
    """Weights at a set of points and one time; ``overflow`` flags capping."""

    xi: np.ndarray
    alpha: np.ndarray
    xibar: np.ndarray
    alphabar: np.ndarray
    rho: float
    overflow: bool


@dataclass(frozen=True, eq=False)
class CarlemanWeights:
    """Carleman weights for a Morse function, ``lam``, ``s`` and horizon ``T``.

    Parameters
    ----------
    morse : MorseFunction
    lam, s : float
        Both at least 1.  ``s`` is the nominal parameter.
    T : float
    scale_s : bool
        When true the weights use ``s_eff = s * T**2``, which keeps the
        profile of ``s * alpha`` fixed in ``t / T``; at ``T = 1`` nothing
        changes.
    """

    morse: MorseFunction
    lam: float
    s: float
    T: float
    scale_s: bool = True

    def __post_init__(self):
        if self.lam < 1 or self.s < 1:
            raise ConfigError("Carleman parameters lambda and s must be at least 1")
        if not self.T > 0:
            raise ConfigError("horizon T must be positive")

    @property
    def s_eff(self) -> float:
        return self.s * self.T**2 if self.scale_s else self.s

    @property
    def m(self) -> float:
        return self.morse.sup

    # pieces that do not depend on time
    def log_E(self, eta):
        """``log`` of the numerator of ``xi``: ``lam (2m + eta)``."""
        return self.lam * (2 * self.m + np.asarray(eta, dtype=float))

    def A(self, eta):
        """Numerator of ``alpha``: ``exp(4 lam m) - exp(lam (2m + eta))`` (nonnegative)."""
        lam, m = self.lam, self.m
        eta = np.asarray(eta, dtype=float)
        # factor out exp(4 lam m) for accuracy: e^{4lm} (1 - e^{lam (eta - 2m)})
        return np.exp(4 * lam * m) * -np.expm1(lam * (eta - 2 * m))

    def tau(self, t):
        t = np.asarray(t, dtype=float)
        return t * (self.T - t)

    def ell(self, t):
        """``l(t)``: ``T^2/4`` on ``[0, T/2]`` and ``t (T - t)`` after."""
        t = np.asarray(t, dtype=float)
        return np.where(t <= self.T / 2, self.T**2 / 4, t * (self.T - t))

    def log_xi(self, eta, t):
        return self.log_E(eta) - np.log(self.tau(t))

    def xi(self, eta, t):
        return np.exp(self.log_xi(eta, t))

    def alpha(self, eta, t):
        return self.A(eta) / self.tau(t)

    def xibar(self, eta, t):
        return np.exp(self.log_E(eta)) / self.ell(t)

    def alphabar(self, eta, t):
        return self.A(eta) / self.ell(t)

    def xibar_star(self, t):
        """``min_x xibar``, attained on the boundary where ``eta = 0``."""
        return np.exp(2 * self.lam * self.m) / self.ell(t)

    def alphabar_star(self, t):
        """``max_x alphabar``, attained on the boundary where ``eta = 0``."""
        return self.A(0.0) / self.ell(t)

    def log_rho(self, times) -> np.ndarray:
        """``log rho(t) = s_eff * alphabar_star(t)`` on ``[0, T]`` (``inf`` at ``T``)."""
        t = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any(t < 0) or np.any(t > self.T * (1 + 1e-14)):
            raise TimeOutOfRange(f"rho requested outside [0, {self.T}]")
        ell = self.ell(np.minimum(t, self.T))
        out = np.full(t.shape, np.inf)
        ok = ell > 0
        out[ok] = self.s_eff * self.A(0.0) / ell[ok]
        return out

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "s": self.s, "s_eff": self.s_eff, "T": self.T,
                "scale_s": self.scale_s, "morse": self.morse.to_dict()}


def eval_weights(w: CarlemanWeights, x, t) -> WeightValues:
    """Evaluate ``xi, alpha, xibar, alphabar`` at points ``x`` and ``rho`` at ``t``.

    Parameters
    ----------
    x : array_like
        Points, shape ``(n,)`` on the interval or ``(n, dim)``.
    t : float
        Time in the open interval ``(0, T)``.

    Raises
    ------
    TimeOutOfRange
        If ``t`` is not in ``(0, T)``.
    """
    t = float(t)
    if not 0 < t < w.T:
        raise TimeOutOfRange(f"t={t} is outside (0, {w.T})")
    eta = w.morse.eta(x)
    xi, f1 = _capped_exp(w.log_xi(eta, t))
    alpha = w.alpha(eta, t)
    xibar, f2 = _capped_exp(w.log_E(eta) - np.log(w.ell(t)))
    alphabar = w.alphabar(eta, t)
    rho, f3 = _capped_exp(w.log_rho(t)[0])
    over = f1 or f2 or f3 or not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(alphabar)))
    return WeightValues(xi, alpha, xibar, alphabar, float(rho), over)


# ---------------------------------------------------------------------------
# Empirical weight bounds
# ---------------------------------------------------------------------------


def default_sample_grid(w: CarlemanWeights, time_samples=200, space_samples=401):
    """Interior time samples and a spatial sample line.

    On the disk the weights depend on ``r`` only, so a radius is sampled.
    """
    times = w.T * np.arange(1, time_samples + 1) / (time_samples + 1)
    if w.morse.kind == "interval":
        pts = np.linspace(0.0, w.morse.params["length"], space_samples)[:, None]
    else:
        r = np.linspace(0.0, w.morse.params["radius"], space_samples)
        pts = np.column_stack([r, np.zeros_like(r)])
    return times, pts


def weight_bounds_check(w: CarlemanWeights, grid=None, method="analytic", powers=(3, 5, 7)) -> dict:
    """Empirical suprema of the weight bounds over a space-time sample.

    Parameters
    ----------
    w : CarlemanWeights
    grid : (times, points), optional
        Times in ``(0, T)`` and spatial points; defaults to
        :func:`default_sample_grid`.
    method : {"analytic", "fd"}
        Derivatives from closed forms or centered differences on the grid.

    Returns
    -------
    dict
        ``dt_alpha_over_xi2``, ``dt_xi_over_xi2``, ``grad_alpha_over_lam_xi``,
        ``dt_weight_ratio`` (``|d_t(s^3 lam^4 xi^3 e^{-2 s alpha})| /
        (s^4 lam^4 xi^5 e^{-2 s alpha})``), ``exp_xi_power`` (sup of
        ``e^{-2 s alpha} xi^r`` per ``r``), the two normalizations of the
        gradient ratio, the boundary decay check and the overflow flag.
    """
    times, pts = default_sample_grid(w) if grid is None else grid
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0) or np.any(times >= w.T):
        raise TimeOutOfRange("sample times must lie in (0, T)")
    s, lam, T = w.s_eff, w.lam, w.T
    eta = w.morse.eta(pts)
    geta = np.linalg.norm(w.morse.grad(pts), axis=1)
    t = times[:, None]
    tau = w.tau(t)
    logE = w.log_E(eta)[None, :]
    A = w.A(eta)[None, :]
    log_xi = logE - np.log(tau)
    xi = np.exp(log_xi)
    alpha = A / tau
    if method == "analytic":
        dtau = T - 2 * t
        dt_xi = -xi * dtau / tau
        dt_alpha = -alpha * dtau / tau
        grad_alpha = lam * geta[None, :] * xi
        dt_log_weight = 3 * dt_xi / xi - 2 * s * dt_alpha
    elif method == "fd":
        dt_xi = np.gradient(xi, times, axis=0)
        dt_alpha = np.gradient(alpha, times, axis=0)
        dt_log_weight = np.gradient(3 * log_xi - 2 * s * alpha, times, axis=0)
        if pts.shape[1] == 1 or w.morse.kind == "interval":
            coord = pts[:, 0]
        else:
            coord = np.linalg.norm(pts, axis=1)
        grad_alpha = np.abs(np.gradient(alpha, coord, axis=1))
    else:
        raise ValueError(f"unknown derivative method {method!r}")

    with np.errstate(over="ignore", invalid="ignore"):
        r1 = np.abs(dt_alpha) / xi**2
        r2 = np.abs(dt_xi) / xi**2
        r3 = grad_alpha / (lam * xi)
        r4 = np.abs(dt_log_weight) / (s * xi**2)
    if method == "fd":
        # keep only entries where every difference is centered
        r1, r2, r4 = r1[1:-1], r2[1:-1], r4[1:-1]
        r3 = r3[:, 1:-1]
    # gradient of s^3 lam^4 xi^3 e^{-2 s alpha} is s^3 lam^5 |grad eta| xi^3 (3 + 2 s xi) e^{-2 s alpha}
    gradw = lam * geta[None, :] * (3 + 2 * s * xi)
    g4 = gradw / (s * xi)
    g5 = g4 / lam

    log_exp_pow = {}
    for r in powers:
        log_exp_pow[r] = -2 * s * alpha + r * log_xi
    sup_log = {r: float(np.max(v)) for r, v in log_exp_pow.items()}
    exp_pow = {}
    overflow = False
    for r, lv in sup_log.items():
        val, flag = _capped_exp(lv)
        exp_pow[str(r)] = float(val)
        overflow |= flag
    suprema = {
        "dt_alpha_over_xi2": float(np.max(r1)),
        "dt_xi_over_xi2": float(np.max(r2)),
        "grad_alpha_over_lam_xi": float(np.max(r3)),
        "dt_weight_ratio": float(np.max(r4)),
    }
    for v in suprema.values():
        overflow |= not np.isfinite(v) or v > OVERFLOW_SENTINEL
    decay = {}
    for r, lv in log_exp_pow.items():
        edge = max(float(np.max(lv[0])), float(np.max(lv[-1])))
        decay[str(r)] = float(np.exp(edge - sup_log[r])) if np.isfinite(edge) else 0.0
    return {
        "method": method,
        "lambda": lam,
        "s": w.s,
        "s_eff": s,
        "T": T,
        "time_samples": int(len(times)),
        "space_samples": int(len(eta)),
        **suprema,
        "exp_xi_power": exp_pow,
        "log_exp_xi_power": {str(r): v for r, v in sup_log.items()},
        "grad_weight_ratio_lam4": float(np.max(g4)),
        "grad_weight_ratio_lam5": float(np.max(g5)),
        "boundary_decay_ratio": decay,
        "boundary_decay_ok": bool(all(v <= 1e-8 for v in decay.values())),
        "overflow": bool(overflow),
    }


# ---------------------------------------------------------------------------
# Weighted energy functional
# ---------------------------------------------------------------------------


def _node_eta(w, mesh):
    if w.morse.bulk_values is not None and len(w.morse.bulk_values) == mesh.n_bulk:
        return w.morse.bulk_values, np.zeros(mesh.n_boundary)
    bulk = w.morse.eta(mesh.bulk_nodes)
    bulk[mesh.trace_index] = 0.0
    return bulk, np.zeros(mesh.n_boundary)


def _weight_table(w, eta, times, power, barred=False):
    """``e^{-2 s alpha} xi^power`` at nodes and levels; zero where undefined."""
    out = np.zeros((len(times), len(eta)))
    s = w.s_eff
    for k, t in enumerate(times):
        if barred:
            if t >= w.T:
                continue
            ell = w.ell(t)
            lv = -2 * s * w.A(eta) / ell + power * (w.log_E(eta) - np.log(ell))
        else:
            if t <= 0 or t >= w.T:
                continue
            lv = -2 * s * w.alpha(eta, t) + power * w.log_xi(eta, t)
        out[k] = np.exp(np.minimum(lv, _LOG_SENTINEL))
    return out


def carleman_functional(traj, w: CarlemanWeights, time_weights=None) -> dict:
    """Five-term weighted energy ``I(s, lam; Phi)`` and its barred ``L^2`` variant.

    Parameters
    ----------
    traj : Trajectory
        Field ``(phi, phi_Gamma)`` at all time levels.
    w : CarlemanWeights
    time_weights : ndarray, optional
        Quadrature weights of the levels; defaults to the trapezoid rule.
        The unbarred weights vanish at ``t = 0`` and ``t = T``.

    Returns
    -------
    dict
        ``grad`` (``s lam^2 int xi e^{-2 s alpha} |grad phi|^2``),
        ``tangential``, ``normal``, ``bulk`` (``s^3 lam^4 int xi^3 ...``),
        ``boundary`` (``s^3 lam^3 int_Gamma xi^3 ...``), ``total`` and
        ``barred`` (``int e^{-2 s alphabar} xibar^3 (|z|^2 + |z_Gamma|^2)``).
    """
    mesh, tg = traj.mesh, traj.timegrid
    s, lam = w.s_eff, w.lam
    times = tg.times
    tw = tg.trapezoid_weights if time_weights is None else np.asarray(time_weights)
    eta_b, eta_g = _node_eta(w, mesh)
    bulk, bnd = traj.bulk, traj.boundary
    grads = gradient_matrices(mesh)
    grad_sq = sum((G @ bulk.T).T ** 2 for G in grads)
    tang_sq = (tangential_gradient_matrix(mesh) @ bnd.T).T ** 2
    normal_sq = (conormal_stencil(mesh) @ bulk.T).T ** 2
    wb1 = _weight_table(w, eta_b, times, 1)
    wg1 = _weight_table(w, eta_g, times, 1)
    wb3 = _weight_table(w, eta_b, times, 3)
    wg3 = _weight_table(w, eta_g, times, 3)
    Wb, Wg = mesh.bulk_weights, mesh.boundary_weights

    def integrate(weight, vals, space_w):
        return float(np.einsum("k,ki,ki,i->", tw, weight, vals, space_w))

    terms = {
        "grad": s * lam**2 * integrate(wb1, grad_sq, Wb),
        "tangential": s * lam * integrate(wg1, tang_sq, Wg),
        "normal": s * lam * integrate(wg1, normal_sq, Wg),
        "bulk": s**3 * lam**4 * integrate(wb3, bulk**2, Wb),
        "boundary": s**3 * lam**3 * integrate(wg3, bnd**2, Wg),
    }
    terms["total"] = float(sum(terms.values()))
    wbb = _weight_table(w, eta_b, times, 3, barred=True)
    wgb = _weight_table(w, eta_g, times, 3, barred=True)
    terms["barred"] = integrate(wbb, bulk**2, Wb) + integrate(wgb, bnd**2, Wg)
    return terms


# ---------------------------------------------------------------------------
# Monte-Carlo observability quotients
# ---------------------------------------------------------------------------


@dataclass
class ObservabilityStats:
    """Per-sample quotients and their summary.

    ``quotients`` are the energy quotients ``[||Z(0)||^2 + sum_i int rho^{-2}
    |Psi^i|^2] / int_omega |z|^2``; ``carleman_quotients`` the weighted
    counterparts ``[I(Z) + I(H)] / [s^7 lam^8 int_omega e^{-2 s alpha} xi^7 |z|^2]``.
    Skipped samples have ``nan`` entries and are counted in ``skipped``.
    """

    quotients: np.ndarray
    carleman_quotients: np.ndarray
    seed: int
    skipped: int = 0
    bins: int = 20
    details: list = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return len(self.quotients)

    def _valid(self, arr):
        return arr[np.isfinite(arr)]

    def summary(self) -> dict:
        out = {"n_samples": self.n_samples, "skipped": self.skipped, "seed": self.seed}
        for name, arr in (("quotient", self.quotients), ("carleman_quotient", self.carleman_quotients)):
            v = self._valid(arr)
            if len(v) == 0:
                out[name] = {"max": None, "mean": None, "min": None, "std": None,
                             "histogram": {"counts": [], "edges": []}}
                continue
            counts, edges = np.histogram(v, bins=self.bins)
            out[name] = {
                "max": float(v.max()),
                "mean": float(v.mean()),
                "min": float(v.min()),
                "std": float(v.std()),
                "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
            }
        return out

    def csv_rows(self):
        for i, (q, c) in enumerate(zip(self.quotients, self.carleman_quotients)):
            yield (i, q, c)


def _sample_one(problem, w, seed, index, log_rho, tables):
    mesh, tg = problem.mesh, problem.timegrid
    rng = np.random.default_rng([seed, index])
    Z_T = rng.standard_normal(mesh.size)
    Z_T = Z_T / problem.state_norm(Z_T)
    casc = cascade_solve(problem, Z_T)
    z = casc.Z
    W, Wb = mesh.weights, mesh.bulk_weights
    z0 = z.values[0]
    rho_m2 = np.where(np.isfinite(log_rho), np.exp(-2 * np.minimum(log_rho, _LOG_MAX)), 0.0)
    sw = tg.state_weights * rho_m2
    psi_term = sum(float(np.einsum("k,ki,i,ki->", sw, p.values, W, p.values)) for p in casc.psis)
    num = float(np.dot(W * z0, z0)) + psi_term
    zw = problem.regions.omega.apply(z.bulk)
    den = float(np.einsum("k,ki,i,ki->", tg.control_weights, zw, Wb, zw))
    if not np.isfinite(den) or den <= np.finfo(float).tiny * max(num, 1.0):
        raise DenominatorUnderflow(f"sample {index}: observation of z on omega underflows")

    H = Trajectory(casc.H(problem), mesh, tg)
    num_c = carleman_functional(z, w)["total"] + carleman_functional(H, w)["total"]
    wb7 = tables
    den_c = w.s_eff**7 * w.lam**8 * float(
        np.einsum("k,ki,ki,i->", tg.trapezoid_weights, wb7, zw**2, Wb)
    )
    qc = num_c / den_c if den_c > 0 and np.isfinite(den_c) else np.nan
    detail = {"index": index, "numerator": num, "denominator": den,
              "picard_iters": casc.picard_iters, "carleman_denominator": den_c}
    return num / den, qc, detail


def observability_sample(problem, w: CarlemanWeights, n_samples: int, seed: int = 0,
                         threads: int = 1, bins: int = 20) -> ObservabilityStats:
    """Monte-Carlo estimate of the observability constant.

    Each draw ``i`` uses the generator ``default_rng([seed, i])``: nodal
    standard normal terminal data normalized to unit norm, followed by one
    adjoint cascade solve.  Results do not depend on ``threads``.

    Parameters
    ----------
    problem : ControlProblem
    w : CarlemanWeights
    n_samples : int
    seed : int
    threads : int
        Worker threads; draws are independent.
    bins : int
        Histogram bins of the summary.

    Raises
    ------
    NoConvergence
        If an adjoint cascade solve fails.
    """
    if n_samples < 0:
        raise ConfigError("number of samples must be nonnegative")
    tg = problem.timegrid
    log_rho = w.log_rho(tg.times)
    eta_b, _ = _node_eta(w, problem.mesh)
    wb7 = _weight_table(w, eta_b, tg.times, 7)

    def run(i):
        try:
            return _sample_one(problem, w, seed, i, log_rho, wb7)
        except DenominatorUnderflow as exc:
            logger.warning("%s", exc)
            return None

    if threads and threads > 1 and n_samples > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(run, range(n_samples)))
    else:
        results = [run(i) for i in range(n_samples)]
    q = np.full(n_samples, np.nan)
    qc = np.full(n_samples, np.nan)
    details, skipped = [], 0
    for i, res in enumerate(results):
        if res is None:
            skipped += 1
            continue
        q[i], qc[i], d = res
        details.append(d)
    return ObservabilityStats(q, qc, int(seed), skipped, bins, details)

