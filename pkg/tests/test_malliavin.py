import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from scl.errors import ConfigError, DomainError
from scl.malliavin import (MalliavinPlugin, SyntheticKernel, brownian_plugin, brownian_square_plugin,
                           check_plugin, clark_ocone_check, counterexample_ratio, deterministic_plugin,
                           limit_kernel_check, martingale_representation, osc_band_edge, osc_integrand,
                           osc_theta_sequence, osc_window_integral, singular_integrand, singular_window_integral,
                           window_diagonal_check, zero_plugin, _brownian)


def _nested_quad_osc(theta):
    # independent oracle: iterated adaptive quadrature with the band edges as breakpoints
    edges = [math.sqrt(2) * osc_band_edge(n) * f for n in range(1, 40) for f in (0.5, 1.0)]

    def inner(t):
        pts = [t - e for e in edges if 0 < t - e < t][:50]
        return quad(lambda s: osc_integrand(s, t), 0, t, points=pts, limit=200)[0]

    return quad(inner, 0, theta, points=[e for e in edges if e < theta][:50], limit=200)[0]


class TestPlugins:
    def test_adapted_plugins(self):
        for plugin in (brownian_plugin(), brownian_square_plugin(), zero_plugin()):
            rep = check_plugin(plugin)
            assert rep.adapted and rep.minus_zero

    def test_anticipating_kernel_is_flagged(self):
        bad = MalliavinPlugin("bad", lambda t, w: w, lambda s, t, ws, wt: 1.0, lambda t, w: 1.0,
                              minus=lambda t, w: 0.5)
        rep = check_plugin(bad)
        assert not rep.adapted and rep.max_future_kernel == 1.0
        assert not rep.minus_zero

    def test_kernel_vanishes_above_diagonal(self):
        w = np.ones(3)
        assert np.all(brownian_plugin().D(0.6, 0.5, w, w) == 0)
        np.testing.assert_array_equal(brownian_square_plugin().D(0.2, 0.5, w, 3 * w), 6.0)

    def test_deterministic_shapes(self):
        plug = deterministic_plugin(lambda t: np.array([t, 2 * t]), shape=(2,))
        w = np.zeros(4)
        assert plug.sample(0.5, w).shape == (4, 2)
        assert not plug.D(0.1, 0.5, w, w).any()


class TestClarkOcone:
    def test_brownian_terminal_value_is_exact(self):
        res = clark_ocone_check(brownian_plugin(), 500, 64, 1)
        assert res.residual == 0.0 and res.conditional_error == 0.0

    def test_square_matches_discretisation_error(self):
        # the Ito sum of 2 W dW misses sum(dW^2) - T, whose relative L2 size is sqrt(2 / (3N))
        N = 4096
        res = clark_ocone_check(brownian_square_plugin(), 2000, N, 1, conditional="analytic")
        assert res.residual == pytest.approx(math.sqrt(2 / (3 * N)), rel=0.2)
        assert res.mean == 1.0

    def test_regression_route(self):
        res = clark_ocone_check(brownian_square_plugin(), 2000, 256, 2)
        assert res.residual < 0.1 and res.conditional_error < 0.1

    def test_route_errors(self):
        with pytest.raises(ConfigError):
            clark_ocone_check(brownian_plugin(), 10, 4, 0, conditional="exact")
        no_oracle = MalliavinPlugin("x", lambda t, w: w, lambda s, t, ws, wt: 1.0, lambda t, w: 1.0)
        with pytest.raises(ConfigError):
            clark_ocone_check(no_oracle, 10, 4, 0, conditional="analytic")


def _average_kernel(k):
    # single-node estimates carry noise of order (P dt)^(-1/2); average over source nodes
    return float(np.mean([k.values(j).mean() for j in range(k.s_start, k.t_end)]))


@pytest.fixture(scope="module")
def brownian():
    return _brownian(3, 4000, 32, 1.0)


class TestMartingaleRepresentation:
    def test_brownian_kernel_is_one(self, brownian):
        dt, dW, W = brownian
        k = martingale_representation(W, W, dW, dt)
        assert k.values(5).shape == (4000, 27, 1)
        assert abs(_average_kernel(k) - 1) < 0.03
        assert k.reconstruction_error(W) < 0.1

    def test_square_kernel(self, brownian):
        # E(D_s W(t)^2 | F_s) = 2 W(s)
        dt, dW, W = brownian
        vals = martingale_representation(W**2, W, dW, dt).values(10)[..., 0]
        assert np.mean(np.abs(vals - 2 * W[:, 10:11])) < 0.15

    def test_deterministic_kernel_is_exactly_zero(self, brownian):
        dt, dW, W = brownian
        phi = np.broadcast_to(np.sin(np.linspace(0, 1, 33)), W.shape)
        k = martingale_representation(phi, W, dW, dt)
        assert k.is_zero()
        assert k.reconstruction_error(phi) == 0.0

    def test_window(self, brownian):
        dt, dW, W = brownian
        k = martingale_representation(W, W, dW, dt, window=(8, 12))
        assert sorted(k.coeffs) == [8, 9, 10, 11]
        assert k.values(8).shape[1] == 4
        with pytest.raises(ConfigError):
            k.reconstruct()
        with pytest.raises(DomainError):
            martingale_representation(W, W, dW, dt, window=(12, 8))

    def test_state_features_without_brownian(self, brownian):
        dt, dW, W = brownian
        x = 1 + W[:, :, None]
        k = martingale_representation(x, W, dW, dt, state=x, include_w=False)
        assert abs(_average_kernel(k) - 1) < 0.03


class TestWindowDiagonal:
    def test_brownian_has_no_window_error(self):
        tr = window_diagonal_check(brownian_plugin(), [0.1, 0.05], [0.2, 0.5], 50, 0, substeps=8)
        assert np.all(tr.estimate == 0)

    def test_square_ratio_two_thirds(self):
        # E|2(W(t) - W(s))|^2 = 4(t - s); the window integral is 2 theta^3 / 3
        tr = window_diagonal_check(brownian_square_plugin(), [0.2, 0.1], [0.3], 3000, 4, substeps=16)
        ratio = tr.estimate / tr.theta
        assert np.all(np.abs(ratio - 2 / 3) < 4 * tr.stderr / tr.theta + 0.01)

    def test_odd_substeps(self):
        with pytest.raises(ConfigError):
            window_diagonal_check(brownian_plugin(), [0.1], [0.2], 10, 0, substeps=7)


class TestLimitKernels:
    def test_constant_kernels(self):
        times = np.linspace(0, 1, 65)
        ones = np.ones((3, 65))
        res = limit_kernel_check(ones, ones, times, 0.25, [0.25, 0.125])
        np.testing.assert_allclose(res.first, 0.5, atol=1e-14)
        np.testing.assert_allclose(res.second, 0.5, atol=1e-14)
        assert res.target == 0.5

    def test_smooth_kernels_converge(self):
        times = np.linspace(0, 1, 1025)
        phi = np.cos(times)[None].repeat(2, 0)
        psi = np.exp(times)[None].repeat(2, 0)
        res = limit_kernel_check(phi, psi, times, 0.5, [0.25, 0.0625, 0.015625])
        err = np.abs(res.first - res.target)
        assert res.target == pytest.approx(0.5 * math.cos(0.5) * math.exp(0.5))
        assert err[2] < err[1] < err[0] < 0.1

    def test_window_validation(self):
        times = np.linspace(0, 1, 9)
        x = np.ones((2, 9))
        with pytest.raises(DomainError):
            limit_kernel_check(x, x, times, 0.25, [0.125])
        with pytest.raises(DomainError):
            limit_kernel_check(x, x, times, 0.75, [0.5])


class TestCounterexamples:
    @pytest.mark.parametrize("kind, index", [("half", 2), ("full", 2)])
    def test_band_integral_against_nested_quadrature(self, kind, index):
        theta = osc_theta_sequence(kind, 3)[index]
        assert osc_window_integral(theta) == pytest.approx(_nested_quad_osc(theta), abs=1e-10)

    def test_singular_integral_against_quadrature(self):
        ref = quad(lambda t: quad(lambda s: singular_integrand(s, t), 0, t, limit=200)[0], 0, 0.3)[0]
        assert singular_window_integral(0.3) == pytest.approx(ref, rel=1e-9)

    def test_oscillating_subsequences_disagree(self):
        half = counterexample_ratio("osc", 0.0, osc_theta_sequence("half", 8)).estimate
        full = counterexample_ratio("osc", 0.0, osc_theta_sequence("full", 8)).estimate
        np.testing.assert_allclose(half, 1 / 8, atol=1e-12)
        np.testing.assert_allclose(full, 5 / 32, atol=1e-12)

    def test_singular_ratio_diverges(self):
        tr = counterexample_ratio("singular", 0.1, [0.1, 0.01, 0.001])
        np.testing.assert_allclose(tr.estimate, -4 / 3 / np.sqrt(tr.theta))

    @given(st.floats(1e-6, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_oscillating_ratio_is_bounded(self, theta):
        r = counterexample_ratio("osc", 0.0, [theta]).estimate[0]
        assert -0.5 <= r <= 0.5

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            counterexample_ratio("smooth", 0.0, [0.1])
        with pytest.raises(DomainError):
            counterexample_ratio("singular", 0.95, [0.1])
        with pytest.raises(ConfigError):
            osc_theta_sequence("quarter", 3)


class TestSyntheticKernel:
    def test_values_and_zero(self):
        k = SyntheticKernel(lambda s, t: [t - s], 5, 0.25, 0, 4)
        vals = k.values(1)
        assert vals.shape == (5, 3, 1)
        np.testing.assert_allclose(vals[0, :, 0], [0.25, 0.5, 0.75])
        assert not k.is_zero()
        assert SyntheticKernel(lambda s, t: [0.0], 5, 0.25, 0, 4).is_zero()
