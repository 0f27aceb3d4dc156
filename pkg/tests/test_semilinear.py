import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackelberg_heat.errors import ConfigError, OuterNoConvergence, PerStepNoConvergence
from stackelberg_heat.hum import hum_cg
from stackelberg_heat.nash import nash_solve, state, verify_nash
from stackelberg_heat.semilinear import (
    Nonlinearity,
    linearize,
    lipschitz_probe,
    quasi_nash_solve,
    semilinear_forward,
    semilinear_functionals,
    semilinear_null_control,
    trajectory_box,
)

from conftest import DESK, DISK, make_setup


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_nonlinearity_must_vanish_at_zero():
    with pytest.raises(ConfigError):
        Nonlinearity(F="s + 1")
    with pytest.raises(ConfigError):
        Nonlinearity(G="cos(s)")


def test_nonlinearity_identifiers_checked():
    with pytest.raises(ConfigError):
        Nonlinearity(F="x*s")
    with pytest.raises(ConfigError):
        Nonlinearity(F="s", LF=-1.0)


def test_symbolic_and_given_derivatives_agree():
    a = Nonlinearity(F="0.2*tanh(s) + 0.1*gx", G="0.3*sin(s)")
    b = Nonlinearity(F="0.2*tanh(s) + 0.1*gx", G="0.3*sin(s)",
                     derivatives={"dF_ds": "0.2*(1 - tanh(s)^2)", "dF_dgx": "0.1", "dG_ds": "0.3*cos(s)"})
    s = np.linspace(-2, 2, 9)
    for x, y in zip(a.bulk_derivatives(s, [s]), b.bulk_derivatives(s, [s])):
        np.testing.assert_allclose(x, y, rtol=1e-14, atol=1e-15)
    for x, y in zip(a.boundary_derivatives(s, s), b.boundary_derivatives(s, s)):
        np.testing.assert_allclose(x, y, rtol=1e-14, atol=1e-15)


def test_presets_and_config():
    nl = Nonlinearity.preset("tanh", 0.1)
    assert nl.LF == 0.1
    assert Nonlinearity.from_config({"F": "0", "G": "0", "LF": 0, "LG": None}).is_zero
    with pytest.raises(ConfigError):
        Nonlinearity.preset("cube", 1.0)


@pytest.mark.parametrize("theta", [0.5, 1.0])
@pytest.mark.parametrize("base", ["interval", "disk"])
def test_zero_nonlinearity_reduces_to_linear(theta, base):
    s = make_setup(DISK if base == "disk" else DESK, time={"theta": theta})
    p = s.problem
    src = p.regions.omega.apply(np.ones(p.control_shape()))
    lin = p.integrator.forward(p.Y0, src).values
    semi = semilinear_forward(p, Nonlinearity(), sources=src).values
    assert np.abs(semi - lin).max() <= 1e-12 * np.abs(lin).max()


@pytest.mark.parametrize("theta", [0.5, 1.0])
def test_linear_nonlinearity_matches_potentials(theta):
    base = make_setup(time={"theta": theta})
    shifted = make_setup(time={"theta": theta}, coefficients={"a": "0.7", "b": "0.3"})
    semi = semilinear_forward(base.problem, Nonlinearity(F="0.7*s", G="0.3*s")).values
    lin = shifted.problem.integrator.forward(shifted.problem.Y0).values
    assert _rel(semi, lin) <= 1e-10


def test_linear_gradient_term_matches_drift():
    base = make_setup()
    shifted = make_setup(coefficients={"Bx": "0.4"})
    semi = semilinear_forward(base.problem, Nonlinearity(F="0.4*gx")).values
    lin = shifted.problem.integrator.forward(shifted.problem.Y0).values
    assert _rel(semi, lin) <= 1e-10


def test_tanh_picard_iterations(desk):
    traj = semilinear_forward(desk.problem, Nonlinearity(F="0.1*tanh(s)", G="0.1*tanh(s)"))
    assert traj.picard_iterations.max() <= 6


def test_per_step_no_convergence(desk):
    with pytest.raises(PerStepNoConvergence) as exc:
        semilinear_forward(desk.problem, Nonlinearity(F="0.1*tanh(s)"), max_iter=1)
    assert exc.value.step >= 1


def test_linearization_is_exact_at_linearization_point(desk):
    p = desk.problem
    nl = Nonlinearity(F="0.3*tanh(s)", G="0.2*sin(s)")
    traj = semilinear_forward(p, nl)
    coeffs, E = linearize(p, nl, traj.values)
    lin = p.with_coefficients(coeffs).integrator.forward(p.Y0, E).values
    assert _rel(lin, traj.values) <= 1e-10


def test_linearize_requires_implicit_euler():
    s = make_setup(time={"theta": 0.5})
    with pytest.raises(ConfigError):
        linearize(s.problem, Nonlinearity(F="0.1*tanh(s)"), s.problem.integrator.forward(s.problem.Y0).values)


def test_quasi_nash_zero_nonlinearity(desk, rng):
    p = desk.problem
    f = rng.standard_normal(p.control_shape())
    lin = nash_solve(p, f, tol=1e-12)
    q = quasi_nash_solve(p, Nonlinearity(), f)
    for a, b in ((q.v1, lin.v1), (q.v2, lin.v2)):
        assert np.abs(a - b).max() <= 1e-10 * max(np.abs(b).max(), 1.0)


def test_quasi_nash_linear_nonlinearity(rng):
    base = make_setup(followers={"target1": "x", "target2": "1-x"})
    shifted = make_setup(followers={"target1": "x", "target2": "1-x"}, coefficients={"a": "0.5"})
    f = rng.standard_normal(base.problem.control_shape())
    q = quasi_nash_solve(base.problem, Nonlinearity(F="0.5*s"), f)
    lin = nash_solve(shifted.problem, f, tol=1e-12)
    assert np.abs(q.v1 - lin.v1).max() <= 1e-10 * np.abs(lin.v1).max()


def test_quasi_nash_consistent_targets():
    s = make_setup()
    p = s.problem
    nl = Nonlinearity(F="0.1*tanh(s)")
    y = semilinear_forward(p, nl).trajectory.bulk
    q = quasi_nash_solve(p.with_data(targets=(y, y)), nl)
    assert q.outer_iterations == 1
    assert max(np.abs(q.v1).max(), np.abs(q.v2).max()) <= 1e-10


def test_quasi_nash_stationarity_tanh():
    s = make_setup(followers={"target1": "sin(pi*x)", "target2": "x"})
    p = s.problem
    nl = Nonlinearity(F="0.05*tanh(s)", G="0.05*tanh(s)")
    f = p.regions.omega.apply(np.ones(p.control_shape()))
    q = quasi_nash_solve(p, nl, f)
    assert q.monotone
    g = verify_nash(p, f, q.v1, q.v2, functional=semilinear_functionals(p, nl, f))
    assert max(g) <= 1e-5


def test_quasi_nash_outer_failure_reported():
    s = make_setup(followers={"target1": "sin(pi*x)"})
    with pytest.raises(OuterNoConvergence):
        quasi_nash_solve(s.problem, Nonlinearity(F="0.5*tanh(s)"), tol=1e-14, max_iter=1)


def test_null_control_zero_nonlinearity_matches_hum(desk):
    p = desk.problem
    lin = hum_cg(p, eps=1e-3)
    semi = semilinear_null_control(p, Nonlinearity(), eps=1e-3)
    assert np.abs(semi.f - lin.f).max() <= 1e-10 * np.abs(lin.f).max()
    assert semi.terminal_norm == pytest.approx(lin.terminal_norm, rel=1e-10)


@pytest.mark.parametrize("scale", [0.05, 0.1])
def test_null_control_tanh_prox(desk, scale):
    nl = Nonlinearity(F=f"{scale}*tanh(s)", G=f"{scale}*tanh(s)")
    r = semilinear_null_control(desk.problem, nl, eps=1e-3, solver="prox")
    assert r.terminal_norm <= 5e-3
    assert r.extras["outer_monotone"]
    assert r.extras["outer_iterations"] >= 1


def test_null_control_unknown_solver(desk):
    with pytest.raises(ConfigError):
        semilinear_null_control(desk.problem, Nonlinearity(), solver="newton")


@settings(max_examples=10, deadline=None)
@given(scale=st.floats(0.01, 2.0), seed=st.integers(0, 1000))
def test_lipschitz_probe_respects_declared_constant(scale, seed):
    nl = Nonlinearity(F=f"{scale}*tanh(s)", G=f"{scale}*sin(s)", LF=scale, LG=scale)
    rep = lipschitz_probe(nl, {"s": (-3, 3), "gx": (-1, 1), "gt": (-1, 1)}, n_pairs=2000, seed=seed)
    assert rep["F"]["ok"] and rep["G"]["ok"]
    assert rep["F"]["quotient"] <= 1.01 * scale


def test_lipschitz_probe_flags_understated_constant():
    nl = Nonlinearity(F="2*tanh(s)", LF=0.5)
    rep = lipschitz_probe(nl, {"s": (-0.5, 0.5)})
    assert not rep["F"]["ok"]


def test_trajectory_box_covers_states(desk):
    traj = semilinear_forward(desk.problem, Nonlinearity(F="0.1*tanh(s)"))
    box = trajectory_box(desk.mesh, traj.values)
    lo, hi = box["s"]
    assert lo < traj.values.min() and hi > traj.values.max()
