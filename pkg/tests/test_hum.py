import numpy as np
import pytest

from stackelberg_heat.carleman import CarlemanWeights, build_morse
from stackelberg_heat.errors import NoConvergence, RhoWeightInfinite
from stackelberg_heat.hum import (
    apply_gramian,
    cascade_solve,
    cost_bound_report,
    dense_gramian,
    extract_control,
    hum_cg,
    hum_prox,
    linear_term,
    optimality_solve,
    verify_optimality_system,
)
from stackelberg_heat.oracles import DenseSpaceTime
from stackelberg_heat.pdecore import duality_terms

from conftest import make_setup, small


@pytest.fixture(scope="module")
def tiny():
    return small(8, 8, followers={"target1": "x", "target2": "1-x"})


@pytest.fixture(scope="module")
def mid():
    return small(16, 32)


def _log_rho(setup):
    w = CarlemanWeights(build_morse(setup.mesh, setup.regions.omega_prime), 2.0, 3.0, setup.timegrid.T)
    return w.log_rho(setup.timegrid.times)


def test_cascade_zero_terminal(tiny):
    c = cascade_solve(tiny.problem, np.zeros(tiny.mesh.size))
    assert c.picard_iters == 1
    assert not c.Z.values.any() and not c.psi1.values.any() and not c.psi2.values.any()


def test_cascade_boundary_conditions(mid, rng):
    Z_T = rng.standard_normal(mid.mesh.size)
    c = cascade_solve(mid.problem, Z_T)
    assert np.array_equal(c.Z.final, Z_T)
    assert not c.psi1.initial.any() and not c.psi2.initial.any()
    assert c.picard_residual <= mid.problem.picard_tol


def test_cascade_near_decoupled_for_large_penalty(mid, rng):
    p = mid.problem.with_followers(mu=(1e8, 1e8))
    Z_T = rng.standard_normal(mid.mesh.size)
    one = cascade_solve(p, Z_T, tol=1.0, max_iter=1)
    two = cascade_solve(p, Z_T, tol=0.0 + 1e-300, max_iter=50)
    diff = np.linalg.norm(one.Z.values - two.Z.values) / np.linalg.norm(two.Z.values)
    assert diff <= 1e-8


def test_cascade_matches_dense_space_time(tiny, rng):
    Z_T = rng.standard_normal(tiny.mesh.size)
    dense = DenseSpaceTime(tiny.problem).cascade(tiny.problem, Z_T)
    it = cascade_solve(tiny.problem, Z_T).Z.values.ravel()
    assert np.abs(it - dense).max() <= 1e-9 * np.abs(dense).max()


def test_cascade_no_convergence(mid, rng):
    p = mid.problem.with_followers(mu=(1e-4, 1e-4))
    with pytest.raises(NoConvergence):
        cascade_solve(p, rng.standard_normal(mid.mesh.size), max_iter=5)


def test_gramian_zero(tiny):
    assert not apply_gramian(tiny.problem, np.zeros(tiny.mesh.size)).any()


def test_gramian_pairing_symmetry(mid, rng):
    p = mid.problem
    U, V = rng.standard_normal((2, mid.mesh.size))
    a = p.state_inner(apply_gramian(p, U), V)
    b = p.state_inner(U, apply_gramian(p, V))
    assert abs(a - b) <= 1e-10 * (abs(a) + abs(b))


def test_gramian_pairing_equals_observation(mid, rng):
    p = mid.problem
    U, V = rng.standard_normal((2, mid.mesh.size))
    zu = cascade_solve(p, U).Z.bulk
    zv = cascade_solve(p, V).Z.bulk
    obs = p.control_inner(extract_control(p, zu), zv)
    assert p.state_inner(apply_gramian(p, U), V) == pytest.approx(obs, rel=1e-9)


def test_dense_gramian_symmetric_psd(tiny):
    G = dense_gramian(tiny.problem)
    s = np.sqrt(tiny.mesh.weights)
    Gt = s[:, None] * G / s[None, :]
    assert np.linalg.norm(Gt - Gt.T) <= 1e-10 * np.linalg.norm(Gt)
    assert np.linalg.eigvalsh(0.5 * (Gt + Gt.T)).min() >= -1e-12


def test_linear_term_zero_and_linear(mid, rng):
    p = mid.problem
    zeros = (p.zeros_control(), p.zeros_control())
    assert not linear_term(p, np.zeros(mid.mesh.size), zeros).any()
    A, B = rng.standard_normal((2, mid.mesh.size))
    lhs = linear_term(p, 2 * A - B, zeros)
    rhs = 2 * linear_term(p, A, zeros) - linear_term(p, B, zeros)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * np.abs(rhs).max())


def test_linear_term_duality_cross_check(mid, rng):
    p = mid.problem
    Y0 = rng.standard_normal(mid.mesh.size)
    targets = tuple(rng.standard_normal(p.control_shape()) for _ in range(2))
    pt = p.with_data(targets=targets)
    c = linear_term(p, Y0, targets)
    for _ in range(5):
        Z_T = rng.standard_normal(mid.mesh.size)
        casc = cascade_solve(pt, Z_T)
        zero = p.zeros_control()
        rhs = duality_terms(optimality_solve(p, zero, Y0, targets).Y, casc.Z, zero, casc.psis,
                            targets, p.alphas, p.regions)
        lhs = p.state_inner(c, Z_T)
        expected = rhs["initial"] - rhs["targets"]
        assert abs(lhs - expected) <= 1e-10 * (abs(lhs) + abs(rhs["initial"]) + abs(rhs["targets"]))


def test_optimality_system_duality(rng):
    s = small(64, 128)
    p = s.problem
    Y0, Z_T = rng.standard_normal((2, s.mesh.size))
    targets = tuple(rng.standard_normal(p.control_shape()) for _ in range(2))
    f = rng.standard_normal(p.control_shape())
    opt = optimality_solve(p, f, Y0, targets)
    casc = cascade_solve(p.with_data(targets=targets), Z_T)
    d = duality_terms(opt.Y, casc.Z, f, casc.psis, targets, p.alphas, p.regions)
    assert abs(d["residual"]) <= 1e-10 * d["scale"]


def test_optimality_no_convergence(mid):
    p = mid.problem.with_followers(mu=(1e-4, 1e-4))
    with pytest.raises(NoConvergence):
        optimality_solve(p, max_iter=3)


@pytest.mark.parametrize("solver", [hum_cg, hum_prox])
def test_zero_data_zero_control(mid, solver):
    p = mid.problem
    zeros = (p.zeros_control(), p.zeros_control())
    r = solver(p, np.zeros(mid.mesh.size), zeros, eps=1e-3)
    assert not r.Z_T.any() and not r.f.any()
    assert r.terminal_norm == 0.0


def test_control_supported_on_omega(desk):
    r = hum_cg(desk.problem, eps=1e-3)
    outside = ~desk.regions.omega.mask
    assert not r.f[:, outside].any()
    assert not r.f[-1].any()
    assert np.isfinite(r.terminal_norm)


def test_cg_sweep_monotone(desk):
    norms = [hum_cg(desk.problem, eps=e).terminal_norm for e in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))


def test_duality_at_cg_iterates(desk):
    p = desk.problem
    seen = []
    hum_cg(p, eps=1e-3, callback=lambda k, Z: seen.append(Z.copy()) if k in (1, 3, 5) else None)
    assert len(seen) == 3
    for Z_T in seen:
        casc = cascade_solve(p, Z_T)
        f = extract_control(p, casc.Z.bulk)
        opt = optimality_solve(p, f)
        d = duality_terms(opt.Y, casc.Z, f, casc.psis, p.targets, p.alphas, p.regions)
        assert abs(d["residual"]) <= 1e-10 * d["scale"]


def test_prox_reproduces_cg_at_matched_penalty(desk):
    # At a nonzero minimizer, grad + eps Z/||Z|| = 0 is the quadratic-penalty
    # system with penalty eps/||Z||, so the two solvers share their solution.
    p = desk.problem
    a = hum_cg(p, eps=1e-5, tol=1e-12, max_iter=2000)
    b = hum_prox(p, eps=1e-5 * p.state_norm(a.Z_T), tol=1e-8)
    diff = a.f - b.f
    assert np.sqrt(p.control_inner(diff, diff) / p.control_inner(a.f, a.f)) <= 1e-3


def test_prox_zero_branch(desk):
    p = desk.problem
    c = linear_term(p)
    r = hum_prox(p, eps=2 * p.state_norm(c))
    assert r.extras["zero_branch"]
    assert not r.Z_T.any()
    assert r.terminal_norm == pytest.approx(p.state_norm(c))


def test_prox_terminal_bound_and_subgradient(desk):
    r = hum_prox(desk.problem, eps=1e-3)
    assert r.terminal_norm <= 1.05e-3
    assert not r.extras["zero_branch"]
    assert r.extras["subgradient_residual"] <= 1e-9 * r.extras["linear_term_norm"]


@pytest.mark.parametrize("solver", [hum_cg, hum_prox])
def test_homogeneity_in_initial_state(desk, solver):
    p = desk.problem
    zeros = (p.zeros_control(), p.zeros_control())
    a = solver(p, p.Y0, zeros, eps=1e-3, tol=1e-11)
    b = solver(p, 2 * p.Y0, zeros, eps=2e-3 if solver is hum_prox else 1e-3, tol=1e-11)
    assert np.abs(b.f - 2 * a.f).max() <= 1e-8 * np.abs(a.f).max()


def test_hum_eps_must_be_positive(desk):
    with pytest.raises(ValueError):
        hum_cg(desk.problem, eps=0.0)


def test_verify_optimality_system_zero_problem(tiny):
    p = tiny.problem
    zeros = (p.zeros_control(), p.zeros_control())
    r = hum_cg(p, np.zeros(tiny.mesh.size), zeros)
    rep = verify_optimality_system(p, r, np.zeros(tiny.mesh.size), zeros)
    for key in ("Y", "Z", "phi1", "phi2", "psi1", "psi2", "f_mismatch", "duality_residual"):
        assert rep[key] == 0.0


def test_verify_optimality_system_desk(desk):
    r = hum_cg(desk.problem, eps=1e-3)
    rep = verify_optimality_system(desk.problem, r)
    assert rep["max_equation"] <= 1e-8
    assert rep["f_mismatch"] <= 1e-12
    assert rep["terminal_Z"] == 0.0 and rep["initial_psi"] == 0.0


def test_cost_bound_zero_targets(desk):
    r = hum_cg(desk.problem, eps=1e-3)
    rep = cost_bound_report(desk.problem, r, _log_rho(desk))
    assert rep["C_emp"] == pytest.approx(r.control_norm / desk.problem.state_norm(desk.problem.Y0))


def test_cost_bound_decaying_targets_finite():
    # rho grows like exp(K/(T-t)); a polynomial envelope cannot compensate,
    # an exp(-K'/(T-t)) envelope with K' above K can.
    env = "(0.1-t)^3*exp(-3/max2(0.1-t, 1e-9))"
    s = make_setup(followers={"target1": f"x*{env}", "target2": env})
    r = hum_cg(s.problem, eps=1e-3)
    rep = cost_bound_report(s.problem, r, _log_rho(s))
    assert np.isfinite(rep["C_emp"]) and all(np.isfinite(rep["rho_target_norms"]))
    assert rep["rho_target_norms"][1] > 0


@pytest.mark.parametrize("target", ["1", "(0.1-t)^3"])
def test_cost_bound_nondecaying_target_flagged(target):
    s = make_setup(followers={"target1": target})
    r = hum_cg(s.problem, eps=1e-3)
    with pytest.raises(RhoWeightInfinite):
        cost_bound_report(s.problem, r, _log_rho(s))
