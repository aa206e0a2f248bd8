import math

import numpy as np
import pytest
from scipy import integrate

from sbldp.errors import MissingDensity, TimeAtTerminal
from sbldp.model import (
    BridgeSpec,
    DiffusionModel,
    brownian,
    default_domain_radius,
    deterministic_flow,
    drift_jacobian,
    finite_cost,
    from_dict,
    h_transform_drift,
    limit_cost,
    ornstein_uhlenbeck,
    reversal_drift,
    sampled_lipschitz,
)


def fd_log_gradient_x(model, t, x, y, h=1e-6):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (model.transition_log_density(t, x + e, 1.0, y)
                  - model.transition_log_density(t, x - e, 1.0, y)) / (2 * h)
    return out


class TestDensity:
    @pytest.mark.parametrize("model", [brownian(0.3), ornstein_uhlenbeck(1.5, 0.3)])
    def test_integrates_to_one(self, model):
        total, _ = integrate.quad(
            lambda y: math.exp(model.transition_log_density(0.0, np.array([0.4]), 1.0,
                                                            np.array([y]))), -20, 20,
            epsabs=1e-12, epsrel=1e-12, limit=200)
        assert abs(total - 1.0) <= 1e-6

    def test_bm_diffusion_is_identity(self):
        m = brownian(0.2, dim=3)
        np.testing.assert_array_equal(m.diffusion(0.3, np.zeros(3)), np.eye(3))

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            brownian(-1.0)
        with pytest.raises(ValueError):
            brownian(0.1, dim=0)
        with pytest.raises(ValueError):
            ornstein_uhlenbeck(0.0, 0.1)

    def test_endpoints_checked_against_radius(self):
        with pytest.raises(ValueError):
            BridgeSpec(brownian(0.1, domain_radius=2.0), [0.0], [3.0])
        with pytest.raises(ValueError):
            BridgeSpec(brownian(0.1, dim=2), [0.0], [0.0])


class TestHTransform:
    def test_bm_value(self):
        spec = BridgeSpec(brownian(0.1), [2.0], [0.0])
        assert h_transform_drift(spec, 0.5, [2.0])[0] == pytest.approx(-4.0)

    @pytest.mark.parametrize("t", [0.0, 0.3, 0.9])
    def test_zero_at_target(self, t):
        spec = BridgeSpec(brownian(0.1), [0.7], [0.7])
        assert h_transform_drift(spec, t, [0.7])[0] == 0.0

    def test_ou_matches_density_gradient(self):
        # eta * grad_x log p from finite differences of the Gaussian density.
        model = ornstein_uhlenbeck(1.0, 0.2)
        spec = BridgeSpec(model, [0.0], [1.0])
        oracle = model.eta * fd_log_gradient_x(model, 0.0, [0.0], [1.0])
        value = h_transform_drift(spec, 0.0, [0.0])
        np.testing.assert_allclose(value, oracle, rtol=1e-6)
        assert value[0] == pytest.approx(2 * math.exp(-1) / (1 - math.exp(-2)), rel=1e-12)

    @pytest.mark.parametrize("t,x,y", [(0.2, 0.5, -1.0), (0.7, -2.0, 1.0), (0.95, 0.1, 0.3)])
    def test_ou_generic_points(self, t, x, y):
        model = ornstein_uhlenbeck(0.8, 0.05)
        spec = BridgeSpec(model, [x], [y])
        oracle = model.eta * fd_log_gradient_x(model, t, [x], [y])
        np.testing.assert_allclose(h_transform_drift(spec, t, [x]), oracle, rtol=1e-5)

    def test_ou_small_theta_recovers_bm(self):
        spec = BridgeSpec(ornstein_uhlenbeck(1e-6, 0.1), [0.0], [1.0])
        assert abs(h_transform_drift(spec, 0.0, [0.0])[0] - 1.0) <= 1e-5

    def test_terminal_time_rejected(self):
        spec = BridgeSpec(brownian(0.1), [0.0], [1.0])
        with pytest.raises(TimeAtTerminal):
            h_transform_drift(spec, 1.0, [0.0])

    def test_eta_independent(self):
        a = h_transform_drift(BridgeSpec(brownian(0.5), [0.0], [1.0]), 0.3, [0.2])
        b = h_transform_drift(BridgeSpec(brownian(0.01), [0.0], [1.0]), 0.3, [0.2])
        np.testing.assert_array_equal(a, b)

    def test_generic_without_gradient(self):
        model = DiffusionModel(drift=lambda t, x: 0 * x, diffusion=lambda t, x: np.eye(1),
                               eta=0.1, dim=1)
        with pytest.raises(MissingDensity):
            h_transform_drift(BridgeSpec(model, [0.0], [1.0]), 0.2, [0.0])


class TestReversal:
    def test_bm_closed_form(self):
        spec = BridgeSpec(brownian(0.1), [0.5], [1.0])
        assert reversal_drift(spec, 0.25, [1.5])[0] == pytest.approx(-(1.5 - 0.5) / 0.75)

    def test_bm_zero_at_start(self):
        spec = BridgeSpec(brownian(0.1), [0.5], [1.0])
        assert reversal_drift(spec, 0.4, [0.5])[0] == 0.0

    def test_ou_matches_fd(self):
        model = ornstein_uhlenbeck(1.0, 0.3)
        spec = BridgeSpec(model, [0.0], [1.0])
        h = 1e-6
        f = lambda z: model.transition_log_density(0.0, np.array([0.0]), 1.0, np.array([z]))
        oracle = model.eta * (f(0.5 + h) - f(0.5 - h)) / (2 * h)
        assert reversal_drift(spec, 0.0, [0.5])[0] == pytest.approx(oracle, abs=1e-5)

    def test_generic_needs_density(self):
        model = DiffusionModel(drift=lambda t, x: 0 * x, diffusion=lambda t, x: np.eye(1),
                               eta=0.1, dim=1)
        with pytest.raises(MissingDensity):
            reversal_drift(BridgeSpec(model, [0.0], [1.0]), 0.2, [0.0])

    def test_generic_with_density_matches_bm(self):
        bm = brownian(0.2)
        model = DiffusionModel(drift=bm.drift, diffusion=bm.diffusion, eta=0.2, dim=1,
                               transition_log_density=bm.transition_log_density)
        a = reversal_drift(BridgeSpec(model, [0.0], [1.0]), 0.3, [0.8])
        b = reversal_drift(BridgeSpec(bm, [0.0], [1.0]), 0.3, [0.8])
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestCosts:
    def test_bm_quadratic(self):
        assert limit_cost(brownian(0.1), np.array([0.0]), np.array([2.0])) == pytest.approx(2.0)

    @pytest.mark.parametrize("model", [brownian(0.1), ornstein_uhlenbeck(2.0, 0.1)])
    def test_zero_displacement(self, model):
        if model.kind == "ou":
            x = np.array([0.3])
            y = np.exp(-2.0) * x
        else:
            x = y = np.array([0.3])
        assert limit_cost(model, x, y) == pytest.approx(0.0, abs=1e-15)

    def test_ou_flow_endpoint(self):
        assert limit_cost(ornstein_uhlenbeck(1.0, 0.1), np.array([1.0]),
                          np.array([math.exp(-1)])) == pytest.approx(0.0, abs=1e-15)

    def test_ou_small_theta(self):
        c = limit_cost(ornstein_uhlenbeck(1e-5, 0.1), np.array([0.3]), np.array([-0.9]))
        assert abs(c - 0.5 * 1.2 ** 2) <= 1e-4

    @pytest.mark.parametrize("model", [brownian(1e-3), ornstein_uhlenbeck(1.0, 1e-3)])
    def test_finite_eta_close_to_limit(self, model):
        x, y = np.array([0.0]), np.array([1.0])
        lim = limit_cost(model, x, y)
        assert abs(finite_cost(model, x, y) - lim) <= 0.02 * lim

    def test_generic_missing_limit(self):
        model = DiffusionModel(drift=lambda t, x: 0 * x, diffusion=lambda t, x: np.eye(1),
                               eta=0.1, dim=1)
        with pytest.raises(MissingDensity):
            limit_cost(model, np.zeros(1), np.ones(1))


class TestHelpers:
    def test_lipschitz_finite_and_bounded(self):
        # OU drift derivative in x has modulus at most a^2 / V(delta) <= 1 / V(delta).
        model = ornstein_uhlenbeck(1.0, 0.1)
        lip = sampled_lipschitz(model, 0.1, 2.0, n=300, seed=1)
        bound = 1.0 / (-math.expm1(-0.2) / 2)
        assert 0 < lip <= bound + 1e-9

    def test_flow(self):
        t = np.linspace(0, 1, 11)
        flow = deterministic_flow(ornstein_uhlenbeck(2.0, 0.1), np.array([1.0]), t)
        np.testing.assert_allclose(flow[:, 0], np.exp(-2 * t))

    def test_generic_flow_rk4(self):
        model = DiffusionModel(drift=lambda t, x: -x, diffusion=lambda t, x: np.eye(1),
                               eta=0.1, dim=1)
        t = np.linspace(0, 1, 101)
        np.testing.assert_allclose(deterministic_flow(model, np.array([1.0]), t)[:, 0],
                                   np.exp(-t), atol=1e-9)

    def test_jacobian_matches_fd(self):
        model = ornstein_uhlenbeck(0.7, 0.1)
        t, x, y = 0.4, np.array([0.3]), np.array([1.0])
        from sbldp.model import bridge_drift
        h = 1e-6
        fd = ((-0.7 * (x + h) + bridge_drift(model, t, x + h, y))
              - (-0.7 * (x - h) + bridge_drift(model, t, x - h, y))) / (2 * h)
        assert drift_jacobian(model, t, x, y)[0, 0] == pytest.approx(fd[0], rel=1e-6)

    def test_default_radius(self):
        assert default_domain_radius([[0.0], [1.0]], [[-1.0]]) == pytest.approx(20.0)

    def test_round_trip(self):
        for model in (brownian(0.1, 2, 5.0), ornstein_uhlenbeck(1.3, 0.2)):
            again = from_dict(model.to_dict())
            assert again.to_dict() == model.to_dict()

    def test_with_eta(self):
        m = ornstein_uhlenbeck(1.3, 0.2).with_eta(0.05)
        assert m.eta == 0.05 and m.theta == 1.3
