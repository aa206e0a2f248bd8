import itertools
import math
import warnings

import numpy as np
import pytest

from sbldp.eot import (
    DiscreteMarginal,
    build_cost,
    dual_sensitivity,
    entropic_objective,
    entropy_decomposition,
    exact_ot,
    relative_entropy,
    sample_static_coupling,
    sinkhorn,
    static_rate,
)
from sbldp.errors import OffSupport, SizeCapExceeded
from sbldp.model import brownian, ornstein_uhlenbeck

from oracles import constrained_oracle


def random_instance(seed, n=5, m=5):
    rng = np.random.default_rng(seed)
    mu = DiscreteMarginal(rng.normal(size=(n, 1)), rng.dirichlet(np.ones(n)))
    nu = DiscreteMarginal(rng.normal(size=(m, 1)), rng.dirichlet(np.ones(m)))
    return mu, nu, build_cost(brownian(0.1), mu, nu)


class TestMarginal:
    def test_weights_normalised(self):
        with pytest.raises(ValueError):
            DiscreteMarginal(np.zeros((2, 1)), [0.3, 0.3])
        with pytest.raises(ValueError):
            DiscreteMarginal(np.zeros((2, 1)), [1.5, -0.5])

    def test_index_of(self):
        mu = DiscreteMarginal.uniform([[0.0], [1.0]])
        assert mu.index_of([1.0]) == 1
        assert mu.index_of([0.5]) is None


class TestCost:
    def test_bm_limit(self):
        mu, nu = DiscreteMarginal.dirac([0.0]), DiscreteMarginal.dirac([2.0])
        assert build_cost(brownian(0.1), mu, nu)[0, 0] == pytest.approx(2.0)

    def test_flow_image_zero(self):
        model = ornstein_uhlenbeck(0.5, 0.1)
        mu = DiscreteMarginal.dirac([1.0])
        nu = DiscreteMarginal.dirac([math.exp(-0.5)])
        assert build_cost(model, mu, nu)[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_finite_eta_close(self):
        model = brownian(1e-3)
        mu = DiscreteMarginal.uniform([[0.0], [1.0], [2.0], [3.0]])
        nu = DiscreteMarginal.uniform([[-1.0], [-2.0], [-3.0], [-4.0]])
        lim = build_cost(model, mu, nu, "limit")
        fin = build_cost(model, mu, nu, "finite_eta")
        assert np.all(np.abs(fin - lim) <= 0.02 * lim)


class TestSinkhorn:
    def test_single_atom(self):
        mu, nu = DiscreteMarginal.dirac([0.0]), DiscreteMarginal.dirac([1.0])
        out = sinkhorn(np.array([[0.5]]), mu, nu, 0.1)
        np.testing.assert_allclose(out.plan, [[1.0]])

    def test_high_temperature_product(self):
        # exact plan: diagonal 0.5 / (1 + exp(-1/eta)) = 0.25125 at eta = 100
        mu = nu = DiscreteMarginal.uniform([[0.0], [1.0]])
        out = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), mu, nu, 100.0, tol=1e-13)
        diag = 0.5 / (1 + math.exp(-0.01))
        np.testing.assert_allclose(out.plan, [[diag, 0.5 - diag], [0.5 - diag, diag]], atol=1e-12)
        assert np.all(np.abs(out.plan - 0.25) <= 1 / (8 * 100.0) + 1e-12)

    def test_approaches_product(self):
        mu = nu = DiscreteMarginal.uniform([[0.0], [1.0]])
        out = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), mu, nu, 1e4)
        assert np.all(np.abs(out.plan - 0.25) <= 1e-4)

    def test_low_temperature_diagonal(self):
        mu = nu = DiscreteMarginal.uniform([[0.0], [1.0]])
        out = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), mu, nu, 0.01)
        assert np.all(np.abs(np.diag(out.plan) - 0.5) <= 1e-6)
        assert out.plan[0, 1] <= 1e-6 and out.plan[1, 0] <= 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_against_constrained_oracle(self, seed):
        mu, nu, cost = random_instance(seed)
        out = sinkhorn(cost, mu, nu, 0.5, tol=1e-12)
        assert out.marginal_error <= 1e-8
        oracle = constrained_oracle(cost, mu.weights, nu.weights, 0.5)
        assert abs(out.objective - oracle) <= 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_schedule_converges(self, seed):
        mu, nu, cost = random_instance(seed)
        exact = exact_ot(cost, mu, nu).value
        gaps = []
        for eta in (1.0, 0.3, 0.1, 0.03, 0.01):
            out = sinkhorn(cost, mu, nu, eta, tol=1e-10)
            gap = abs(out.objective - exact)
            assert gap <= eta * math.log(25) + 1e-6
            gaps.append(gap)
        assert all(b < a for a, b in zip(gaps, gaps[1:]))

    def test_plan_positive(self):
        mu, nu, cost = random_instance(5)
        assert np.all(sinkhorn(cost, mu, nu, 0.2).plan > 0)

    def test_cost_shift_invariance(self):
        mu, nu, cost = random_instance(6)
        a = sinkhorn(cost, mu, nu, 0.2, tol=1e-12).plan
        b = sinkhorn(cost + 3.7, mu, nu, 0.2, tol=1e-12).plan
        assert np.max(np.abs(a - b)) <= 1e-10

    def test_log_domain_agrees(self):
        mu, nu, cost = random_instance(7)
        a = sinkhorn(cost, mu, nu, 0.2, tol=1e-12)
        b = sinkhorn(cost, mu, nu, 0.2, tol=1e-12, log_domain=True)
        assert b.log_domain and not a.log_domain
        assert np.max(np.abs(a.plan - b.plan)) <= 1e-9

    def test_gibbs_form_and_duals(self):
        mu, nu, cost = random_instance(8)
        out = sinkhorn(cost, mu, nu, 0.3, tol=1e-12)
        assert out.psi[0] == 0.0
        # diag(u) K diag(v) with psi = -eta log u and phi = eta log v
        gibbs = np.exp((-out.psi[:, None] + out.phi[None, :] - cost) / 0.3)
        np.testing.assert_allclose(gibbs, out.plan, rtol=1e-8)

    def test_non_convergence_flagged(self):
        mu, nu, cost = random_instance(9)
        with pytest.warns(RuntimeWarning):
            out = sinkhorn(cost, mu, nu, 0.01, tol=1e-14, max_iter=3)
        assert not out.converged

    def test_objective_helper(self):
        mu = nu = DiscreteMarginal.uniform([[0.0], [1.0]])
        plan = np.full((2, 2), 0.25)
        assert entropic_objective(plan, np.ones((2, 2)), mu, nu, 0.7) == pytest.approx(1.0)


class TestExact:
    def test_single(self):
        mu, nu = DiscreteMarginal.dirac([0.0]), DiscreteMarginal.dirac([1.0])
        plan, value, psi, phi = exact_ot(np.array([[0.5]]), mu, nu)
        assert value == 0.5

    def test_zero_cost_matching(self):
        pts = [[0.0], [1.0], [2.0]]
        mu = nu = DiscreteMarginal.uniform(pts)
        out = exact_ot(build_cost(brownian(0.1), mu, nu), mu, nu)
        np.testing.assert_allclose(out.plan, np.eye(3) / 3, atol=1e-12)
        assert out.value == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_enumeration_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cost = rng.uniform(size=(4, 4))
        mu = nu = DiscreteMarginal.uniform(np.arange(4.0)[:, None])
        best = min(sum(cost[i, p[i]] for i in range(4)) / 4
                   for p in itertools.permutations(range(4)))
        out = exact_ot(cost, mu, nu)
        assert out.value == pytest.approx(best, abs=1e-12)
        support = out.plan > 1e-12
        np.testing.assert_allclose(cost[support], (-out.psi[:, None] + out.phi)[support],
                                   atol=1e-12)

    def test_size_cap(self):
        mu = nu = DiscreteMarginal.uniform(np.arange(5.0)[:, None])
        with pytest.raises(SizeCapExceeded):
            exact_ot(np.zeros((5, 5)), mu, nu, size_cap=10)


class TestStaticRate:
    def test_cross_pair(self):
        mu = nu = DiscreteMarginal.uniform([[0.0], [1.0]])
        ot = exact_ot(np.array([[0.0, 1.0], [1.0, 0.0]]), mu, nu)
        assert static_rate(ot, [0.0], [0.0]) == pytest.approx(0.0, abs=1e-12)
        assert static_rate(ot, [0.0], [1.0]) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_nonnegative_and_zero_on_support(self, seed):
        rng = np.random.default_rng(seed)
        mu = DiscreteMarginal(rng.normal(size=(4, 1)), rng.dirichlet(np.ones(4)))
        nu = DiscreteMarginal(rng.normal(size=(4, 1)), rng.dirichlet(np.ones(4)))
        ot = exact_ot(build_cost(brownian(0.1), mu, nu), mu, nu)
        for i, j in itertools.product(range(4), range(4)):
            r = static_rate(ot, mu.atoms[i], nu.atoms[j])
            assert r >= -1e-10
            if ot.plan[i, j] > 1e-12:
                assert abs(r) <= 1e-10

    def test_off_support(self):
        mu = nu = DiscreteMarginal.uniform([[0.0], [1.0]])
        ot = exact_ot(np.array([[0.0, 1.0], [1.0, 0.0]]), mu, nu)
        assert static_rate(ot, [0.5], [0.0]) == math.inf
        with pytest.raises(OffSupport):
            static_rate(ot, [0.5], [0.0], strict=True)

    def test_min_norm_duals_order_free(self):
        mu = nu = DiscreteMarginal.uniform(np.arange(6.0)[:, None])
        out = dual_sensitivity(build_cost(brownian(0.1), mu, nu), mu, nu, seed=2)
        assert not out["flagged"]

    def test_dual_sensitivity_reports(self):
        mu = nu = DiscreteMarginal.uniform([[0.0], [1.0], [2.0]])
        out = dual_sensitivity(build_cost(brownian(0.1), mu, nu), mu, nu, seed=1)
        assert set(out) == {"max_rate_difference", "flagged"}


class TestSampling:
    def test_deterministic_plan(self):
        idx = sample_static_coupling(np.array([[0.0, 1.0], [0.0, 0.0]]), 100, seed=0)
        assert np.all(idx == [0, 1])

    def test_diagonal_frequencies(self):
        idx = sample_static_coupling(np.diag([0.5, 0.5]), 100000, seed=1)
        assert np.all(idx[:, 0] == idx[:, 1])
        assert abs(np.mean(idx[:, 0] == 0) - 0.5) <= 0.01

    def test_multinomial_concentration(self):
        mu, nu, cost = random_instance(2)
        plan = sinkhorn(cost, mu, nu, 0.3).plan
        n = 50000
        idx = sample_static_coupling(plan, n, seed=3)
        counts = np.zeros_like(plan)
        np.add.at(counts, (idx[:, 0], idx[:, 1]), 1)
        assert np.max(np.abs(counts / n - plan)) <= 4 / math.sqrt(n)

    def test_atoms_returned_with_marginals(self):
        mu = DiscreteMarginal.dirac([0.0])
        nu = DiscreteMarginal.uniform([[-1.0], [1.0]])
        out = sinkhorn(build_cost(brownian(0.1), mu, nu), mu, nu, 0.1)
        xs, ys = sample_static_coupling(out, 10, seed=0)
        assert xs.shape == (10, 1) and set(ys[:, 0]) <= {-1.0, 1.0}


class TestEntropy:
    def test_chain_rule(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pi = rng.dirichlet(np.ones(64)).reshape(4, 4, 4)
            ref = rng.dirichlet(np.ones(64)).reshape(4, 4, 4)
            d = entropy_decomposition(pi, ref)
            assert abs(d["joint"] - d["endpoint"] - d["bridge"]) <= 1e-12

    def test_relative_entropy_edge_cases(self):
        assert relative_entropy([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert relative_entropy([1.0, 0.0], [0.0, 1.0]) == math.inf


def test_no_warning_on_easy_instance():
    mu, nu, cost = random_instance(1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sinkhorn(cost, mu, nu, 0.5)
