from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from absorbmfg.errors import InvalidParameterError
from absorbmfg.kernel import (
    bump_kernel,
    smoothed_loss,
    smoothed_loss_derivative,
    smoothed_loss_derivative_path,
    smoothed_loss_path,
)


def mp_normalization(eps: float) -> float:
    mpmath.mp.dps = 30
    return float(mpmath.quad(lambda u: mpmath.exp(-1 / (eps - u)), [0, eps / 2, eps]))


@pytest.mark.parametrize("eps", [0.05, 0.2, 1.0, 3.0])
def test_normalization_matches_high_precision_quadrature(eps):
    k = bump_kernel(eps)
    assert k.normalization == pytest.approx(mp_normalization(eps), rel=1e-10)
    # the kernel integrates to one under an independent quadrature
    mpmath.mp.dps = 30
    total = mpmath.quad(lambda u: mpmath.exp(-1 / (eps - u)) / k.normalization, [0, eps / 2, eps])
    assert abs(float(total) - 1.0) < 1e-8


def test_value_at_zero_for_unit_support():
    k = bump_kernel(1.0)
    assert float(k(0.0)) == pytest.approx(math.exp(-1.0) / mp_normalization(1.0), rel=1e-10)
    assert k.peak == pytest.approx(float(k(0.0)))


def test_support():
    k = bump_kernel(0.3)
    u = np.array([-1.0, -1e-12, 0.3, 0.3 + 1e-12, 5.0])
    assert np.all(k(u) == 0.0)
    inside = np.linspace(0.0, 0.3, 50, endpoint=False)
    assert np.all(k(inside) > 0.0)


@pytest.mark.parametrize("eps", [0.1, 1.0])
def test_one_sided_differences_vanish_at_support_edge(eps):
    k = bump_kernel(eps)
    h = 1e-3 * eps
    vals = k(eps - h * np.arange(5))
    for order in (1, 2, 3):
        diff = np.diff(vals, n=order)[0] / h**order
        assert abs(diff) < 1e-6


def test_analytic_derivative_matches_central_differences():
    k = bump_kernel(0.5)
    u = np.linspace(0.01, 0.45, 40)
    h = 1e-6
    fd = (k(u + h) - k(u - h)) / (2 * h)
    np.testing.assert_allclose(k.derivative(u), fd, rtol=1e-5, atol=1e-6)


@given(st.floats(max_value=0.0, allow_nan=False) | st.just(float("nan")) | st.just(float("inf")))
def test_invalid_epsilon(eps):
    with pytest.raises(InvalidParameterError):
        bump_kernel(eps)


def riemann(loss, kernel, t, dt, n=400_000):
    """Midpoint rule for int_0^t k(t - s) L(s) ds with L a right-continuous step function."""
    s = (np.arange(n) + 0.5) * t / n
    cell = np.minimum((s / dt).astype(int), len(loss) - 1)
    return float(np.sum(kernel(t - s) * np.asarray(loss)[cell]) * t / n)


class TestSmoothedLoss:
    k = bump_kernel(0.1)
    dt = 0.01

    def test_zero_loss(self):
        loss = np.zeros(101)
        assert smoothed_loss(loss, self.k, 0.7, self.dt) == 0.0
        assert smoothed_loss_derivative(loss, self.k, 0.7, self.dt) == 0.0

    @pytest.mark.parametrize("t", [0.1, 0.35, 0.999])
    def test_unit_loss_after_support(self, t):
        loss = np.ones(101)
        assert abs(smoothed_loss(loss, self.k, t, self.dt) - 1.0) < 1e-8
        assert abs(smoothed_loss_derivative(loss, self.k, t, self.dt)) < 1e-6

    @pytest.mark.parametrize("t", [0.06, 0.23, 0.5])
    def test_half_step_against_riemann_sum(self, t):
        times = self.dt * np.arange(101)
        loss = (times < t / 2).astype(float)
        expected = riemann(loss, self.k, t, self.dt)
        assert smoothed_loss(loss, self.k, t, self.dt) == pytest.approx(expected, abs=1e-6)

    def test_time_outside_horizon(self):
        with pytest.raises(ValueError):
            smoothed_loss(np.ones(11), self.k, 2.0, 0.1)
        with pytest.raises(ValueError):
            smoothed_loss_derivative(np.ones(11), self.k, -0.1, 0.1)

    @pytest.mark.parametrize("eps, h", [(0.1, 1e-5), (0.2, 1e-4), (0.5, 1e-4), (1.0, 1e-4)])
    def test_central_differences_on_100_points(self, eps, h):
        k = bump_kernel(eps)
        rng = np.random.default_rng(0)
        loss = np.sort(rng.uniform(size=101))[::-1]
        # cell midpoints: the derivative jumps at grid times when L does
        ts = self.dt * (np.arange(100) + 0.5)
        for t in ts:
            fd = (smoothed_loss(loss, k, t + h, self.dt) - smoothed_loss(loss, k, t - h, self.dt)) / (2 * h)
            assert smoothed_loss_derivative(loss, k, t, self.dt) == pytest.approx(fd, abs=1e-4)

    def test_central_difference_error_is_second_order(self):
        k = bump_kernel(0.1)
        loss = np.linspace(1.0, 0.2, 101)
        t = 0.055
        exact = smoothed_loss_derivative(loss, k, t, self.dt)

        def err(h):
            fd = (smoothed_loss(loss, k, t + h, self.dt) - smoothed_loss(loss, k, t - h, self.dt)) / (2 * h)
            return abs(fd - exact)

        assert err(1e-4) / err(2e-5) == pytest.approx(25.0, rel=0.05)

    def test_prehistory_makes_constant_loss_flat(self):
        loss = np.full(101, 0.7)
        for t in (0.0, 0.03, 0.08, 0.5):
            assert smoothed_loss(loss, self.k, t, self.dt, l0=0.7) == pytest.approx(0.7, abs=1e-8)
            assert smoothed_loss_derivative(loss, self.k, t, self.dt, l0=0.7) == pytest.approx(0.0, abs=1e-8)

    def test_path_versions_agree_with_pointwise(self):
        rng = np.random.default_rng(1)
        loss = np.sort(rng.uniform(size=51))[::-1]
        dt = 0.02
        k = bump_kernel(0.15)
        vals = smoothed_loss_path(loss, k, dt, l0=loss[0])
        ders = smoothed_loss_derivative_path(loss, k, dt, l0=loss[0])
        for j in range(51):
            t = j * dt
            assert vals[j] == pytest.approx(smoothed_loss(loss, k, t, dt, l0=loss[0]), abs=1e-12)
            assert ders[j] == pytest.approx(smoothed_loss_derivative(loss, k, t, dt, l0=loss[0]), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0.0, 1.0), min_size=5, max_size=60),
    st.floats(0.02, 0.5),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
)
def test_range_and_lipschitz_bound(values, eps, u, v):
    loss = np.asarray(values)
    dt = 1.0 / len(loss)
    k = bump_kernel(eps)
    t, s = u * len(loss) * dt, v * len(loss) * dt
    lt = smoothed_loss(loss, k, t, dt)
    ls = smoothed_loss(loss, k, s, dt)
    assert -1e-12 <= lt <= 1 + 1e-9
    assert abs(lt - ls) <= k.derivative_bound * abs(t - s) + 1e-9
    assert abs(smoothed_loss_derivative(loss, k, t, dt)) <= k.derivative_bound * (1 + 1e-9)
