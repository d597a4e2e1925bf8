import numpy as np
import pytest

from scl import presets
from scl.errors import AdmissibilityError, ConditioningError, ConfigError, DomainError, OracleError, StructureError
from scl.expr import problem_from_expressions
from scl.forward import (PathBundle, PerturbationSpec, TimeGrid, coarsen_increments, cost_samples, estimate_cost,
                         explicit_y1, loglog_slope, perturbation_order_check, simulate_fundamental, simulate_state,
                         simulate_variational)
from scl.norms import sup_norm
from scl.problem import AdmissibleControl


def _gbm_exponent(p, grid, W):
    # closed form for dx = A x dt + C x dW with the lq-scalar coefficients
    return (0.5 - 0.5 * 0.3**2) * grid.times + 0.3 * W


class TestTimeGrid:
    def test_nodes(self):
        g = TimeGrid(8, 2.0)
        assert g.dt == 0.25
        assert g.node(0.76) == 3
        assert g.times[-1] == 2.0

    @pytest.mark.parametrize("steps, T", [(0, 1.0), (4, 0.0)])
    def test_invalid(self, steps, T):
        with pytest.raises(ConfigError):
            TimeGrid(steps, T)

    def test_node_outside(self):
        with pytest.raises(DomainError):
            TimeGrid(4, 1.0).node(1.5)


class TestSimulateState:
    def test_linear_control_is_exact(self):
        # dx = u dt + u dW with constant u has the explicit solution u (t + W)
        p = presets.example33()
        g = TimeGrid(32, 1.0)
        b = simulate_state(p, AdmissibleControl.constant([-0.4]), g, 50, 2)
        np.testing.assert_allclose(b.state[..., 0], -0.4 * (g.times + b.W), atol=1e-14)

    def test_bit_identical_reruns(self):
        p = presets.sine_drift()
        u = AdmissibleControl.constant([0.3])
        a = simulate_state(p, u, TimeGrid(16, 1.0), 40, 9)
        b = simulate_state(p, u, TimeGrid(16, 1.0), 40, 9)
        assert a.state.tobytes() == b.state.tobytes()

    def test_strong_error_against_closed_form(self):
        p = presets.lq_scalar()
        errs = []
        for N in (32, 512):
            g = TimeGrid(N, 1.0)
            b = simulate_state(p, AdmissibleControl.constant([0.0]), g, 2000, 4)
            exact = np.exp(_gbm_exponent(p, g, b.W))
            errs.append(np.mean(np.abs(b.state[:, -1, 0] - exact[:, -1])))
        # Euler-Maruyama with multiplicative noise: strong order 1/2 or better
        assert errs[1] < errs[0] / 3

    def test_noise_reuse_and_shape_check(self):
        p = presets.example33()
        g = TimeGrid(8, 1.0)
        base = simulate_state(p, AdmissibleControl.constant([0.1]), g, 5, 0)
        again = simulate_state(p, AdmissibleControl.constant([0.1]), g, 5, 99, dW=base.dW)
        np.testing.assert_array_equal(base.state, again.state)
        with pytest.raises(ConfigError):
            simulate_state(p, AdmissibleControl.constant([0.1]), g, 6, 0, dW=base.dW)

    def test_horizon_mismatch(self):
        with pytest.raises(ConfigError):
            simulate_state(presets.example33(), AdmissibleControl.constant([0.0]), TimeGrid(8, 2.0), 5, 0)

    def test_inadmissible_control(self):
        with pytest.raises(AdmissibilityError):
            simulate_state(presets.example33(), AdmissibleControl.constant([1.5]), TimeGrid(8, 1.0), 5, 0)

    def test_blow_up_is_reported(self):
        p = problem_from_expressions({
            "n": 1, "m": 1, "T": 1.0, "x0": [1.0], "b": ["100*x[0]**2"], "sigma": ["0*u[0]"],
            "f": "0", "h": "0", "control_set": {"kind": "box", "lower": [-1], "upper": [1]}})
        with pytest.raises(OracleError):
            simulate_state(p, AdmissibleControl.constant([0.0]), TimeGrid(64, 1.0), 4, 0)

    def test_coarsen_matches_coarse_brownian(self):
        dW = np.arange(12.0).reshape(2, 6)
        np.testing.assert_array_equal(coarsen_increments(dW, 3), [[3, 12], [21, 30]])
        with pytest.raises(ConfigError):
            coarsen_increments(dW, 4)


class TestBundleCache:
    def test_round_trip(self, tmp_path):
        b = simulate_state(presets.example34(), AdmissibleControl.constant([0.2, -0.1]), TimeGrid(8, 1.0), 6, 5)
        b.save(tmp_path / "b.sclb")
        c = PathBundle.load(tmp_path / "b.sclb")
        for name in ("dW", "state", "control"):
            np.testing.assert_array_equal(getattr(b, name), getattr(c, name))
        assert c.seed == 5 and c.grid == b.grid

    def test_corrupt_files(self, tmp_path):
        b = simulate_state(presets.example33(), AdmissibleControl.constant([0.0]), TimeGrid(4, 1.0), 3, 0)
        path = tmp_path / "b.sclb"
        b.save(path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(StructureError):
            PathBundle.load(path)
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(StructureError):
            PathBundle.load(path)


class TestCost:
    def test_linear_quadratic_cost(self):
        # J(c) = c^2/2 - E[c^2 (1 + W1)^2]/2 = -c^2/2 for the scalar preset with h = -x^2/2
        mean, se, _ = estimate_cost(presets.example33(), AdmissibleControl.constant([0.6]), TimeGrid(32, 1.0), 20000, 3)
        assert abs(mean + 0.18) < 4 * se

    def test_trapezoid_running_cost(self):
        p = problem_from_expressions({
            "n": 1, "m": 1, "T": 1.0, "x0": [0.0], "b": ["1"], "sigma": ["0*u[0]"],
            "f": "x[0]", "h": "0", "control_set": {"kind": "box", "lower": [-1], "upper": [1]}})
        b = simulate_state(p, AdmissibleControl.constant([0.0]), TimeGrid(10, 1.0), 2, 0)
        # x(t) = t and the trapezoid rule integrates it exactly
        np.testing.assert_allclose(cost_samples(p, b), 0.5, atol=1e-14)


class TestPerturbations:
    def test_needle_window_snaps_to_two_steps(self):
        g = TimeGrid(16, 1.0)
        assert PerturbationSpec.needle(0.25, 1e-6, [1.0]).window(g) == (4, 6)
        assert PerturbationSpec.needle(0.25, 0.25, [1.0]).window(g) == (4, 8)
        with pytest.raises(DomainError):
            PerturbationSpec.needle(0.9, 0.5, [1.0]).window(g)

    def test_needle_direction(self):
        b = simulate_state(presets.example33(), AdmissibleControl.constant([0.25]), TimeGrid(8, 1.0), 3, 0)
        v = PerturbationSpec.needle(0.25, 0.25, [1.0]).sample(b, 1)
        assert np.all(v[:, 2:4] == 0.75) and v[:, :2].sum() == 0 and v[:, 4:].sum() == 0

    def test_towards_and_scaled(self):
        b = simulate_state(presets.example33(), AdmissibleControl.constant([0.25]), TimeGrid(8, 1.0), 3, 0)
        np.testing.assert_allclose(PerturbationSpec.towards(AdmissibleControl.constant([1.0])).sample(b, 1), 0.75)
        np.testing.assert_allclose(PerturbationSpec.convex([0.5]).scaled(-2).sample(b, 1), -1.0)
        with pytest.raises(ConfigError):
            PerturbationSpec.towards(AdmissibleControl.constant([1.0])).scaled(2)

    def test_affine_dynamics_have_exact_first_variation(self):
        # state is affine in the control, so dx = eps y1 and y2 = 0
        p = presets.lq_scalar()
        rep = perturbation_order_check(p, AdmissibleControl.constant([0.1]), PerturbationSpec.convex([0.5]),
                                       [0.4, 0.2, 0.1], TimeGrid(32, 1.0), 200, 1)
        assert rep.slopes["dx"] == pytest.approx(1.0, abs=1e-9)
        assert max(rep.norms["dx-eps*y1"]) < 1e-13

    def test_variational_against_fundamental_matrix(self):
        p = presets.lq_scalar()
        gaps = []
        for N in (128, 512):
            b = simulate_state(p, AdmissibleControl.constant([0.2]), TimeGrid(N, 1.0), 2000, 3)
            pert = PerturbationSpec.convex([0.5])
            a = simulate_variational(p, b, pert, second_order=False)
            c = explicit_y1(p, b, simulate_fundamental(p, b), pert)
            gaps.append(sup_norm(a.y1 - c.y1))
        # both are consistent discretisations of the same process
        assert gaps[1] < 0.7 * gaps[0] and gaps[1] < 0.02

    def test_ladder_too_short(self):
        with pytest.raises(ConfigError):
            perturbation_order_check(presets.example33(), AdmissibleControl.constant([0.0]),
                                     PerturbationSpec.convex([0.5]), [0.1, 0.05], TimeGrid(8, 1.0), 10, 0)

    def test_loglog_slope(self):
        x = np.array([0.1, 0.05, 0.025])
        assert loglog_slope(x, 3 * x**2) == pytest.approx(2.0)
        assert np.isnan(loglog_slope(x, [1.0, 0.0, 1.0]))


class TestFundamentalMatrix:
    def test_closed_form_scalar(self):
        p = presets.lq_scalar()
        g = TimeGrid(64, 1.0)
        b = simulate_state(p, AdmissibleControl.constant([0.2]), g, 500, 3)
        f = simulate_fundamental(p, b)
        exact = np.exp(_gbm_exponent(p, g, b.W))
        np.testing.assert_allclose(f.phi[..., 0, 0], exact, rtol=1e-12)
        np.testing.assert_allclose(f.phi_inv[..., 0, 0], 1 / exact, rtol=1e-12)
        assert f.defect.max() < 1e-12

    def test_euler_scheme_loses_inverse_property(self):
        p = presets.lq_scalar()
        b = simulate_state(p, AdmissibleControl.constant([0.0]), TimeGrid(64, 1.0), 50, 0)
        with pytest.raises(ConditioningError):
            simulate_fundamental(p, b, scheme="euler")

    def test_unknown_scheme(self):
        b = simulate_state(presets.example33(), AdmissibleControl.constant([0.0]), TimeGrid(4, 1.0), 2, 0)
        with pytest.raises(ConfigError):
            simulate_fundamental(presets.example33(), b, scheme="rk4")
