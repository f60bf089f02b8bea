from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from absorbmfg.dynamics import BankRunParams, ControlBox, bankrun_model
from absorbmfg.errors import InvalidControlError, MaximizationError
from absorbmfg.hamiltonian import HamiltonianSpec, hamiltonian, hamiltonian_values, maximize, maximize_values
from absorbmfg.kernel import smoothed_loss_derivative
from absorbmfg.measure_flow import Environment
from absorbmfg.scenarios import brownian_model


def _a(a):
    return np.asarray(a)[..., 0]


def box2_model(**kw):
    """Two-dimensional control entering both coordinates; no closed form declared."""
    base = brownian_model(dim=2, **kw)
    return dataclasses.replace(
        base, b2=lambda t: np.eye(2), controls=ControlBox((-1.0, -0.5), (1.0, 0.5)), quadratic_cost=None
    )


def random_theta(rng, n, model):
    x = rng.uniform(0.0, 3.0, size=(n, model.dim))
    m = rng.uniform(0.0, 1.0, size=n)
    lprime = rng.normal(size=n)
    z = rng.normal(scale=3.0, size=(n, model.dim))
    return x, m, lprime, z


def test_sigma_inverse():
    spec = HamiltonianSpec(bankrun_model())
    np.testing.assert_allclose(spec.model.sigma @ spec.sigma_inverse, np.eye(2), atol=1e-12)
    assert spec.mode == "closed-form-quadratic"
    assert HamiltonianSpec(box2_model()).mode == "projected-ascent"


def test_trivial_zero():
    model = brownian_model(cost=0.0)
    spec = HamiltonianSpec(model)
    env = Environment.constant(model, 1.0)
    assert hamiltonian(spec, 3, [[0.4]], env, 0, [[0.0]], [[0.7]])[0] == 0.0


def test_bankrun_hamiltonian_term_by_term():
    p = BankRunParams()
    model = bankrun_model()
    spec = HamiltonianSpec(model)
    mass = np.linspace(1.0, 0.5, model.n_steps + 1)
    env = Environment.from_traces(model, 0.8 * mass, mass)
    j, x, z, a = 42, np.array([[1.2, 0.3]]), np.array([[0.7, -1.1]]), np.array([[0.4]])
    t = model.times[j]
    lprime = smoothed_loss_derivative(mass[:-1], model.kernel, t, model.dt, l0=mass[0])
    drift_s = p.mu_drift + p.loss_scale * np.exp(p.r * t) * lprime
    drift_y = 0.4 + p.gamma_max * np.tanh((1.2 - p.b_threshold) / p.gamma_scale) - p.lam * (1 - 0.8 * mass[j])
    expected = -p.cost * 0.16 + 0.7 * drift_s / p.sigma_s - 1.1 * drift_y / p.sigma_y
    assert hamiltonian(spec, j, x, env, 0, z, a)[0] == pytest.approx(expected, rel=1e-9)


def test_affine_in_control_when_f_vanishes():
    model = dataclasses.replace(bankrun_model(), f=lambda t, x, m, a: np.zeros(np.shape(a)[0]), quadratic_cost=None)
    spec = HamiltonianSpec(model, mode="numeric-1d")
    rng = np.random.default_rng(0)
    x, m, lp, z = random_theta(rng, 20, model)
    h0 = hamiltonian_values(spec, 0.3, x, m, lp, z, 0.0)
    h1 = hamiltonian_values(spec, 0.3, x, m, lp, z, 0.5)
    h2 = hamiltonian_values(spec, 0.3, x, m, lp, z, -0.8)
    np.testing.assert_allclose((h1 - h0) / 0.5, (h2 - h0) / -0.8, rtol=1e-10)


def test_control_outside_box():
    model = brownian_model()
    with pytest.raises(InvalidControlError):
        hamiltonian(HamiltonianSpec(model), 0, [[0.0]], Environment.constant(model, 1.0), 0, [[1.0]], [[2.0]])


def test_maximizer_examples():
    spec = HamiltonianSpec(brownian_model(cost=1.0))
    a, h = maximize_values(spec, 0.0, [[0.0]], 1.0, 0.0, [[0.0]])
    assert a[0, 0] == 0.0 and h[0] == 0.0
    # interior optimum z / 2c = 2 is clamped to the box edge
    a, h = maximize_values(spec, 0.0, [[0.0]], 1.0, 0.0, [[4.0]])
    assert a[0, 0] == 1.0
    assert h[0] == pytest.approx(-1.0 + 4.0)
    a, _ = maximize_values(spec, 0.0, [[0.0]], 1.0, 0.0, [[1.0]])
    assert a[0, 0] == pytest.approx(0.5)


def test_maximize_against_flow():
    model = bankrun_model()
    spec = HamiltonianSpec(model)
    env = Environment.constant(model, 0.9, 0.9)
    p = BankRunParams()
    z = [[0.1, 0.3 * p.sigma_y * p.cost]]  # interior optimum 0.15
    a, h = maximize(spec, 10, [[1.0, 0.5]], env, 0, z)
    assert a[0, 0] == pytest.approx(0.15)
    assert h[0] == pytest.approx(hamiltonian(spec, 10, [[1.0, 0.5]], env, 0, z, a)[0])


@pytest.mark.parametrize("mode", ["closed-form-quadratic", "numeric-1d", "projected-ascent"])
def test_grid_oracle_bankrun(mode):
    model = bankrun_model()
    spec = HamiltonianSpec(model, mode=mode)
    rng = np.random.default_rng(1)
    x, m, lp, z = random_theta(rng, 40, model)
    a_hat, h_hat = maximize_values(spec, 0.5, x, m, lp, z)
    assert model.controls.contains(a_hat).all()
    grid = np.linspace(model.controls.lower[0], model.controls.upper[0], 10_000)
    for i in range(x.shape[0]):
        vals = hamiltonian_values(spec, 0.5, np.repeat(x[i : i + 1], grid.size, 0), m[i], lp[i], z[i], grid[:, None])
        assert h_hat[i] >= vals.max() - 1e-8


def test_projected_ascent_matches_clamped_closed_form():
    model = box2_model(cost=0.7)
    spec = HamiltonianSpec(model)
    rng = np.random.default_rng(2)
    x, m, lp, z = random_theta(rng, 200, model)
    a_hat, _ = maximize_values(spec, 0.0, x, m, lp, z)
    expected = model.controls.clamp(z / (2 * 0.7))
    np.testing.assert_allclose(a_hat, expected, atol=1e-5)


def test_argmax_dominance():
    rng = np.random.default_rng(3)
    for model in (bankrun_model(), box2_model(cost=0.5)):
        spec = HamiltonianSpec(model)
        x, m, lp, z = random_theta(rng, 1000, model)
        _, h_hat = maximize_values(spec, 0.2, x, m, lp, z)
        for a in model.controls.sample(256, rng):
            h = hamiltonian_values(spec, 0.2, x, m, lp, z, a)
            assert np.all(h_hat >= h - 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-4, 0.1))
def test_maximizer_is_lipschitz_in_z(z1, z2, delta):
    p = BankRunParams()
    spec = HamiltonianSpec(bankrun_model())
    z = np.array([[z1, z2]])
    a, _ = maximize_values(spec, 0.0, [[1.0, 0.5]], 1.0, 0.0, z)
    b, _ = maximize_values(spec, 0.0, [[1.0, 0.5]], 1.0, 0.0, z + delta)
    lip = (1.0 / p.sigma_y) / (2 * p.cost)
    assert abs(a[0, 0] - b[0, 0]) <= lip * delta * np.sqrt(2) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_maximized_hamiltonian_is_convex_in_z(seed):
    rng = np.random.default_rng(seed)
    model = bankrun_model()
    spec = HamiltonianSpec(model)
    x, m, lp, z1 = random_theta(rng, 50, model)
    z2 = rng.normal(scale=3.0, size=z1.shape)
    h1 = maximize_values(spec, 0.1, x, m, lp, z1)[1]
    h2 = maximize_values(spec, 0.1, x, m, lp, z2)[1]
    hm = maximize_values(spec, 0.1, x, m, lp, 0.5 * (z1 + z2))[1]
    assert np.all(hm <= 0.5 * (h1 + h2) + 1e-10)


def test_non_concave_f_is_rejected():
    spike = lambda t, x, m, a: -_a(a) ** 2 + 5 * np.exp(-(((_a(a) - 0.75) / 0.05) ** 2))
    spec = HamiltonianSpec(dataclasses.replace(brownian_model(), f=spike, quadratic_cost=None))
    with pytest.raises(MaximizationError):
        maximize_values(spec, 0.0, np.zeros((1, 1)), 1.0, 0.0, np.zeros((1, 1)))


def test_ties_return_smallest_argmax():
    flat = lambda t, x, m, a: np.zeros(np.shape(a)[0])
    spec = HamiltonianSpec(dataclasses.replace(brownian_model(), f=flat, quadratic_cost=None))
    a, _ = maximize_values(spec, 0.0, np.zeros((3, 1)), 1.0, 0.0, np.zeros((3, 1)))
    np.testing.assert_array_equal(a, -1.0)


def test_bad_modes():
    with pytest.raises(ValueError):
        HamiltonianSpec(brownian_model(), mode="newton")
    with pytest.raises(ValueError):
        HamiltonianSpec(brownian_model(cost=0.0), mode="closed-form-quadratic")
    with pytest.raises(MaximizationError):
        maximize_values(HamiltonianSpec(box2_model(), mode="numeric-1d"), 0.0, np.zeros((1, 2)), 1.0, 0.0, np.zeros((1, 2)))
