import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackelberg_heat.carleman import (
    SCAN_POINTS,
    CarlemanWeights,
    build_morse,
    carleman_functional,
    default_sample_grid,
    eval_weights,
    observability_sample,
    weight_bounds_check,
)
from stackelberg_heat.errors import (
    ConfigError,
    CriticalPointOutsideOmegaPrime,
    TimeOutOfRange,
)
from stackelberg_heat.geometry import build_disk_mesh, build_interval_mesh
from stackelberg_heat.pdecore import TimeGrid, Trajectory

from conftest import DISK, make_setup


def interval_weights(omega_prime=(0.4, 0.6), lam=2.0, s=3.0, T=1.0, n=64, scale_s=True):
    mesh = build_interval_mesh(n)
    return mesh, CarlemanWeights(build_morse(mesh, list(omega_prime)), lam, s, T, scale_s)


def _scan_sign_changes(morse, L=1.0):
    xs = np.linspace(0, L, SCAN_POINTS)
    d = morse.grad(xs)[:, 0]
    sg = np.sign(d[d != 0])
    return xs, d, int(np.sum(sg[1:] != sg[:-1]))


def test_morse_symmetric_case():
    m = build_morse(build_interval_mesh(33), [0.4, 0.6])
    assert m.params["kappa"] == 0.0
    assert m.critical_point == pytest.approx(0.5, abs=1e-4)
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(m.eta(x), x * (1 - x))


@pytest.mark.parametrize("op", [(0.55, 0.75), (0.1, 0.2), (0.3, 0.45), (0.85, 0.95)])
def test_morse_off_center_unique_critical_point(op):
    mesh = build_interval_mesh(65)
    m = build_morse(mesh, list(op))
    xs, d, changes = _scan_sign_changes(m)
    assert changes == 1
    crit = xs[np.argmin(np.abs(d))]
    assert op[0] <= crit <= op[1]
    assert op[0] <= m.critical_point <= op[1]
    assert np.all(m.conormal < 0) and m.c > 0


@settings(max_examples=40, deadline=None)
@given(a=st.floats(0.02, 0.9), width=st.floats(0.02, 0.3))
def test_morse_invariants_property(a, width):
    b = min(a + width, 0.98)
    mesh = build_interval_mesh(41)
    try:
        m = build_morse(mesh, [a, b])
    except ConfigError:
        # omega_prime may contain no node of a coarse grid
        assert not ((mesh.bulk_nodes[:, 0] >= a) & (mesh.bulk_nodes[:, 0] <= b)).any()
        return
    interior = np.ones(mesh.n_bulk, bool)
    interior[mesh.trace_index] = False
    assert np.all(m.bulk_values[interior] > 0)
    assert np.all(m.bulk_values[mesh.trace_index] == 0)
    assert np.all(m.boundary_values == 0)
    assert m.delta > 0 and m.c > 0
    assert _scan_sign_changes(m)[2] == 1
    assert m.sup == pytest.approx(m.eta(np.linspace(0, 1, 20001)).max(), rel=1e-6)


def test_morse_disk():
    mesh = build_disk_mesh(10, 16)
    m = build_morse(mesh, {"r": [0.0, 0.3]})
    r = np.hypot(mesh.bulk_nodes[:, 0], mesh.bulk_nodes[:, 1])
    np.testing.assert_allclose(m.eta(mesh.bulk_nodes), 1 - r**2, atol=1e-15)
    outside = r > 0.3 + 1e-12
    gn = np.linalg.norm(m.gradient, axis=1)
    np.testing.assert_allclose(gn, 2 * r)
    assert gn[outside].min() >= 0.6
    assert m.c == pytest.approx(2.0)


def test_morse_disk_requires_center():
    mesh = build_disk_mesh(6, 16)
    with pytest.raises(CriticalPointOutsideOmegaPrime):
        build_morse(mesh, {"r": [0.4, 0.8]})


def test_weights_at_half_horizon():
    mesh, w = interval_weights(T=2.0)
    x = np.linspace(0, 1, 7)
    eta = w.morse.eta(x)
    expected = np.exp(w.lam * (2 * w.m + eta)) / (w.T**2 / 4)
    np.testing.assert_allclose(eval_weights(w, x, 1.0).xi, expected, rtol=1e-13)


def test_alpha_nonnegative_random_points():
    _, w = interval_weights(omega_prime=(0.55, 0.75))
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, 10_000)
    t = rng.uniform(0, w.T, 10_000)
    eta = w.morse.eta(x)
    assert np.all(w.alpha(eta, t) >= 0)
    assert np.all(w.xi(eta, t) >= 4 / w.T**2)


def test_barred_weights():
    _, w = interval_weights(T=1.5)
    eta = w.morse.eta(np.linspace(0, 1, 9))
    early = np.linspace(0.01, 0.75, 20)
    vals = np.array([w.alphabar(eta, t) for t in early])
    np.testing.assert_array_equal(vals, np.broadcast_to(vals[0], vals.shape))
    for t in np.linspace(0.76, 1.49, 15):
        np.testing.assert_allclose(w.alphabar(eta, t), w.alpha(eta, t), rtol=1e-14)
        np.testing.assert_allclose(w.xibar(eta, t), w.xi(eta, t), rtol=1e-14)
    assert w.ell(0.3) == pytest.approx(1.5**2 / 4)
    assert w.ell(1.0) == pytest.approx(1.0 * 0.5)


def test_rho_profile():
    _, w = interval_weights(T=1.0)
    t_early = np.linspace(0, 0.5, 30)
    lr = w.log_rho(t_early)
    np.testing.assert_array_equal(lr, lr[0])
    t_late = np.linspace(0.5, 0.999, 200)
    assert np.all(np.diff(w.log_rho(t_late)) >= 0)
    assert np.isinf(w.log_rho([1.0])[0])
    assert np.all(np.isfinite(w.log_rho(np.linspace(0, 0.99, 50))))
    with pytest.raises(TimeOutOfRange):
        w.log_rho([1.2])


def test_eval_weights_time_range():
    _, w = interval_weights()
    for t in (0.0, 1.0, -0.1):
        with pytest.raises(TimeOutOfRange):
            eval_weights(w, [0.5], t)


def test_eval_weights_overflow_is_flagged():
    _, w = interval_weights(lam=30.0, s=50.0)
    v = eval_weights(w, np.linspace(0, 1, 11), 1e-6)
    assert v.overflow
    assert np.all(np.isfinite(v.xi))


def test_parameters_validated():
    mesh = build_interval_mesh(9)
    m = build_morse(mesh, [0.4, 0.6])
    with pytest.raises(ConfigError):
        CarlemanWeights(m, 0.5, 3.0, 1.0)


def test_scale_s():
    _, w = interval_weights(T=0.1)
    _, w_raw = interval_weights(T=0.1, scale_s=False)
    assert w.s_eff == pytest.approx(3.0 * 0.01)
    assert w_raw.s_eff == 3.0
    _, w1 = interval_weights(T=1.0)
    assert w1.s_eff == 3.0


def test_weight_bounds_finite_and_stable():
    _, w = interval_weights()
    coarse = weight_bounds_check(w, default_sample_grid(w, 200, 401))
    fine = weight_bounds_check(w, default_sample_grid(w, 400, 801))
    assert not coarse["overflow"]
    assert coarse["boundary_decay_ok"]
    for key in ("dt_alpha_over_xi2", "dt_xi_over_xi2", "grad_alpha_over_lam_xi", "dt_weight_ratio"):
        assert np.isfinite(coarse[key])
        assert fine[key] == pytest.approx(coarse[key], rel=0.2)
    for r in ("3", "5", "7"):
        assert 0 < coarse["exp_xi_power"][r] < np.inf
        assert fine["exp_xi_power"][r] == pytest.approx(coarse["exp_xi_power"][r], rel=0.2)


def test_weight_bounds_fd_cross_check():
    _, w = interval_weights()
    grid = default_sample_grid(w, 400, 801)
    an = weight_bounds_check(w, grid)
    fd = weight_bounds_check(w, grid, method="fd")
    # spatial derivative differences are benign; time differences of
    # 1/(t(T-t)) are not, so only the spatial ratio is compared tightly
    assert fd["grad_alpha_over_lam_xi"] == pytest.approx(an["grad_alpha_over_lam_xi"], rel=0.02)
    assert fd["dt_alpha_over_xi2"] == pytest.approx(an["dt_alpha_over_xi2"], rel=0.5)


def test_weight_bounds_disk():
    mesh = build_disk_mesh(6, 16)
    w = CarlemanWeights(build_morse(mesh, {"r": [0, 0.4]}), 2.0, 3.0, 1.0)
    rep = weight_bounds_check(w)
    assert not rep["overflow"] and rep["boundary_decay_ok"]


def test_weight_bounds_rejects_endpoint_times():
    _, w = interval_weights()
    with pytest.raises(TimeOutOfRange):
        weight_bounds_check(w, (np.array([0.0, 0.5]), np.linspace(0, 1, 5)[:, None]))


def _phi_traj(n=16, M=64, T=1.0, fn=None):
    mesh = build_interval_mesh(n)
    tg = TimeGrid(T, M)
    x = mesh.bulk_nodes[:, 0]
    t = tg.times[:, None]
    bulk = np.sin(np.pi * x)[None, :] * np.sin(np.pi * t / T) ** 2 if fn is None else fn(x, t)
    vals = np.concatenate([bulk, bulk[:, mesh.trace_index]], axis=1)
    return mesh, Trajectory(vals, mesh, tg)


def test_functional_zero_field():
    mesh, traj = _phi_traj()
    w = CarlemanWeights(build_morse(mesh, [0.4, 0.6]), 2.0, 3.0, 1.0)
    zero = Trajectory(np.zeros_like(traj.values), mesh, traj.timegrid)
    assert all(v == 0.0 for v in carleman_functional(zero, w).values())


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3))
def test_functional_quadratic_homogeneity(seed, c):
    mesh = build_disk_mesh(3, 8)
    tg = TimeGrid(1.0, 8)
    w = CarlemanWeights(build_morse(mesh, {"r": [0, 0.5]}), 2.0, 3.0, 1.0)
    vals = np.random.default_rng(seed).standard_normal((9, mesh.size))
    a = carleman_functional(Trajectory(vals, mesh, tg), w)
    b = carleman_functional(Trajectory(c * vals, mesh, tg), w)
    for k in a:
        assert b[k] == pytest.approx(c * c * a[k], rel=1e-12, abs=1e-300)


def test_functional_monotone_under_pointwise_growth():
    mesh, traj = _phi_traj(M=32)
    w = CarlemanWeights(build_morse(mesh, [0.4, 0.6]), 2.0, 3.0, 1.0)
    prev = None
    for scale in (0.5, 1.0, 1.5, 3.0):
        grown = Trajectory(scale * traj.values, mesh, traj.timegrid)
        cur = carleman_functional(grown, w)
        if prev is not None:
            assert all(cur[k] >= prev[k] for k in cur)
        prev = cur


def test_functional_matches_fine_quadrature():
    mesh, traj = _phi_traj(n=16, M=64)
    w = CarlemanWeights(build_morse(mesh, [0.4, 0.6]), 2.0, 3.0, 1.0)
    got = carleman_functional(traj, w)["total"]

    # independent oracle: Gauss-Legendre tensor quadrature of the analytic integrand
    xg, wx = np.polynomial.legendre.leggauss(160)
    tg_, wt = np.polynomial.legendre.leggauss(640)
    x, wx = 0.5 * (xg + 1), 0.5 * wx
    t, wt = 0.5 * (tg_ + 1), 0.5 * wt
    s, lam = w.s_eff, w.lam
    eta = w.morse.eta(x)
    T_, X_ = np.meshgrid(t, x, indexing="ij")
    xi = w.xi(eta[None, :], T_)
    e2 = np.exp(-2 * s * w.alpha(eta[None, :], T_))
    bump = np.sin(np.pi * T_) ** 2
    phi = np.sin(np.pi * X_) * bump
    dphi = np.pi * np.cos(np.pi * X_) * bump
    grad = s * lam**2 * np.einsum("i,j,ij->", wt, wx, xi * e2 * dphi**2)
    bulk = s**3 * lam**4 * np.einsum("i,j,ij->", wt, wx, xi**3 * e2 * phi**2)
    xi0 = w.xi(0.0, t)
    e20 = np.exp(-2 * s * w.alpha(0.0, t))
    normal = s * lam * 2 * np.sum(wt * xi0 * e20 * (np.pi * np.sin(np.pi * t) ** 2) ** 2)
    oracle = grad + bulk + normal
    assert got == pytest.approx(oracle, rel=0.01)


def test_observability_empty():
    s = make_setup()
    w = CarlemanWeights(build_morse(s.mesh, s.regions.omega_prime), 2.0, 3.0, s.timegrid.T)
    stats = observability_sample(s.problem, w, 0)
    summ = stats.summary()
    assert stats.n_samples == 0
    assert summ["quotient"]["max"] is None
    assert list(stats.csv_rows()) == []


def test_observability_deterministic_and_thread_independent():
    s = make_setup(geometry={"n": 16}, time={"M": 32})
    w = CarlemanWeights(build_morse(s.mesh, s.regions.omega_prime), 2.0, 3.0, s.timegrid.T)
    a = observability_sample(s.problem, w, 12, seed=5)
    b = observability_sample(s.problem, w, 12, seed=5, threads=4)
    c = observability_sample(s.problem, w, 12, seed=6)
    np.testing.assert_array_equal(a.quotients, b.quotients)
    np.testing.assert_array_equal(a.carleman_quotients, b.carleman_quotients)
    assert not np.array_equal(a.quotients, c.quotients)
    assert np.all(np.isfinite(a.quotients)) and np.all(a.quotients > 0)
    assert a.summary()["quotient"]["max"] >= a.summary()["quotient"]["mean"]


def test_observability_disk():
    s = make_setup(DISK)
    w = CarlemanWeights(build_morse(s.mesh, s.regions.omega_prime), 2.0, 3.0, s.timegrid.T)
    stats = observability_sample(s.problem, w, 5)
    assert np.all(np.isfinite(stats.quotients))


def test_observability_negative_count():
    s = make_setup(geometry={"n": 8}, time={"M": 8})
    w = CarlemanWeights(build_morse(s.mesh, s.regions.omega_prime), 2.0, 3.0, s.timegrid.T)
    with pytest.raises(ConfigError):
        observability_sample(s.problem, w, -1)
