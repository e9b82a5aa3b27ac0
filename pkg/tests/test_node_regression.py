import math
import unittest

import numpy as np
import pytest
from scipy.special import expit, logit

from config.settings import FitConfig
from distributions.polya import THETA_MAX
from regression.likelihoods import (
    LOG_SIGMA_MIN, GlobalData, GlobalRegSpec, NodeData, NodeRegSpec, aic, bic, global_loglik, node_loglik,
)
from regression.optimizer import maximize, standard_errors
from regression.selection import fallback_node_fit, fit_global, select_node_model
from utils.errors import DataError, DomainError, OptimizationError

STRICT = {"tol": 1e-9, "rel_tol": 0.0, "max_iter": 500}


def design(rng, n_sites, n_covariates=2):
    return np.column_stack([np.ones(n_sites), rng.normal(size=(n_sites, n_covariates))])


def random_node_data(rng, n_sites=20):
    X = design(rng, n_sites)
    n = rng.poisson(6.0, n_sites) + 1
    n1 = rng.binomial(n, rng.uniform(0.1, 0.9, n_sites))
    # make sure both boundaries occur
    n1[0], n1[1] = 0, n[1]
    return NodeData.build(n1, n, X)


def assert_gradient(test, fun, coef, h=1e-5, rtol=1e-6):
    value, grad = fun(coef)
    numeric = np.zeros_like(coef)
    for k in range(len(coef)):
        up, down = coef.copy(), coef.copy()
        up[k] += h
        down[k] -= h
        numeric[k] = (fun(up)[0] - fun(down)[0]) / (2 * h)
    scale = np.maximum(1.0, np.abs(grad))
    test.assertTrue(np.all(np.abs(numeric - grad) / scale < rtol),
                    f"analytic {grad} vs numeric {numeric}")


def simulate_split_data(rng, n_sites, beta, sigma=None, pi1=0.0, mean_total=20.0):
    X = design(rng, n_sites)
    n = rng.poisson(mean_total, n_sites)
    p = expit(X @ beta)
    if sigma is not None:
        p = rng.beta(p / sigma, (1 - p) / sigma)
    n1 = rng.binomial(n, p)
    n1 = np.where(rng.random(n_sites) < pi1, 0, n1)
    return NodeData.build(n1, n, X)


class TestNodeLoglik(unittest.TestCase):
    def test_symmetric_single_site(self):
        data = NodeData.build([1], [2], np.ones((1, 1)))
        value, grad = node_loglik(NodeRegSpec("binomial", [0.0]), data)
        self.assertAlmostEqual(value, math.log(0.5), places=12)
        self.assertAlmostEqual(grad[0], 0.0, places=12)

    def test_empty_parents_skipped(self):
        data = NodeData.build([0, 1, 0], [0, 2, 0], np.ones((3, 1)))
        self.assertEqual(data.n_obs, 1)

    def test_split_exceeds_total(self):
        with self.assertRaises(DataError) as ctx:
            NodeData.build([1, 5], [2, 4], np.ones((2, 1)), site_ids=["s1", "s2"])
        self.assertIn("s2", str(ctx.exception))

    def test_inflation_at_zero_probability(self):
        rng = np.random.default_rng(0)
        data = random_node_data(rng)
        for family, delta in (("binomial", None), ("betabinomial", [-1.0, 0.2, 0.0])):
            plain = NodeRegSpec(family, [0.3, -0.5, 0.1], delta=delta)
            inflated = NodeRegSpec(family, [0.3, -0.5, 0.1], "side1", delta, [-np.inf])
            self.assertEqual(node_loglik(inflated, data)[0], node_loglik(plain, data)[0])

    def test_gradients(self):
        rng = np.random.default_rng(42)
        for family in ("binomial", "betabinomial"):
            for side in ("none", "side1", "side2"):
                for n_b in (1, 3):
                    for _ in range(20):
                        data = random_node_data(rng)
                        spec = NodeRegSpec.zeros(family, side, 3, 3, n_b)
                        coef = rng.uniform(-1.0, 1.0, spec.n_params)
                        if family == "betabinomial":
                            coef[3] = rng.uniform(-3.0, 0.0)
                        assert_gradient(self, lambda c: node_loglik(spec.unpack(c), data), coef)

    def test_swapped_spec_same_loglik(self):
        rng = np.random.default_rng(3)
        data = random_node_data(rng)
        spec = NodeRegSpec("betabinomial", [0.4, -0.2, 0.7], "side1", [-1.5, 0.1, 0.0], [-1.0])
        self.assertAlmostEqual(node_loglik(spec, data)[0],
                               node_loglik(spec.swapped(), data.swapped())[0], places=10)

    def test_spec_validation(self):
        with self.assertRaises(DomainError):
            NodeRegSpec("binomial", [0.0], delta=[0.0])
        with self.assertRaises(DomainError):
            NodeRegSpec("betabinomial", [0.0])
        with self.assertRaises(DomainError):
            NodeRegSpec("binomial", [0.0], "side1")
        with self.assertRaises(DomainError):
            NodeRegSpec("poisson", [0.0])
        with self.assertRaises(DomainError):
            NodeRegSpec("binomial", [0.0, 1.0]).unpack([1.0])


class TestSigmaBound(unittest.TestCase):
    def setUp(self):
        self.data = random_node_data(np.random.default_rng(8))

    def test_gradients_near_lower_bound(self):
        rng = np.random.default_rng(9)
        for side in ("none", "side1"):
            spec = NodeRegSpec.zeros("betabinomial", side, 3, 3, 1)
            for _ in range(5):
                coef = rng.uniform(-1.0, 1.0, spec.n_params)
                coef[3] = LOG_SIGMA_MIN + rng.uniform(1.0, 2.0)
                coef[4:6] = rng.uniform(-0.1, 0.1, 2)
                assert_gradient(self, lambda c: node_loglik(spec.unpack(c), self.data), coef,
                                h=1e-3, rtol=1e-2)

    def test_flat_below_lower_bound(self):
        beta = [0.4, -0.3, 0.2]
        at_bound = NodeRegSpec("betabinomial", beta, delta=[LOG_SIGMA_MIN - 1.0, 0.0, 0.0])
        further = NodeRegSpec("betabinomial", beta, delta=[LOG_SIGMA_MIN - 5.0, 0.0, 0.0])
        value, grad = node_loglik(at_bound, self.data)
        self.assertEqual(value, node_loglik(further, self.data)[0])
        np.testing.assert_array_equal(grad[3:], 0.0)

    def test_lower_bound_keeps_mean_proportion(self):
        beta = [0.4, -0.3, 0.2]
        binomial_value, binomial_grad = node_loglik(NodeRegSpec("binomial", beta), self.data)
        value, grad = node_loglik(NodeRegSpec("betabinomial", beta, delta=[LOG_SIGMA_MIN - 1.0]), self.data)
        self.assertAlmostEqual(value, binomial_value, delta=1e-4)
        np.testing.assert_allclose(grad[:3], binomial_grad, rtol=1e-4, atol=1e-4)
        params = NodeRegSpec("betabinomial", beta, delta=[LOG_SIGMA_MIN - 1.0]).split_parameters(self.data.X)
        np.testing.assert_allclose(params["theta1"] / (params["theta1"] + params["theta2"]),
                                   params["p1"], rtol=1e-12)
        self.assertTrue(np.all(params["theta1"] + params["theta2"] <= THETA_MAX * (1 + 1e-12)))

    def test_underdispersed_splits_gain_nothing_from_sigma(self):
        rng = np.random.default_rng(10)
        X = design(rng, 500)
        n = np.full(500, 20)
        n1 = np.round(n * expit(X @ np.array([0.3, 0.8, -0.4]))).astype(int)
        data = NodeData.build(n1, n, X)
        binomial = NodeRegSpec("binomial", np.zeros(3))
        best = maximize(lambda c: node_loglik(binomial.unpack(c), data), binomial.pack(), STRICT)
        spec = NodeRegSpec("betabinomial", best.coef, delta=[-2.0])
        report = maximize(lambda c: node_loglik(spec.unpack(c), data), spec.pack())
        self.assertLessEqual(report.loglik, best.loglik + 1e-3)



class TestGlobalLoglik(unittest.TestCase):
    def random_data(self, rng, n_sites=20):
        X = design(rng, n_sites)
        y = rng.negative_binomial(2.0, 0.2, n_sites).astype(float)
        y[:3] = 0
        return GlobalData(y, X, np.log(rng.uniform(0.5, 2.0, n_sites)))

    def test_gradients(self):
        rng = np.random.default_rng(7)
        for family in ("poisson", "negbin"):
            for zi in (None, 1, 3):
                for _ in range(20):
                    data = self.random_data(rng)
                    spec = GlobalRegSpec(family, np.zeros(3),
                                         0.0 if family == "negbin" else None,
                                         None if zi is None else np.zeros(zi))
                    coef = rng.uniform(-0.5, 0.5, spec.n_params)
                    coef[0] = rng.uniform(1.0, 2.5)
                    assert_gradient(self, lambda c: global_loglik(spec.unpack(c), data), coef)

    def test_poisson_intercept_is_log_mean(self):
        rng = np.random.default_rng(11)
        y = rng.poisson(7.5, 300)
        data = GlobalData(y, np.ones((300, 1)), np.zeros(300))
        fit = fit_global(data, FitConfig(global_family="poisson", tol=1e-9, rel_tol=0.0))
        self.assertAlmostEqual(fit.spec.beta_omega[0], math.log(y.mean()), places=8)

    def test_offset_shift(self):
        rng = np.random.default_rng(12)
        y = rng.negative_binomial(3.0, 0.3, 300)
        X = design(rng, 300, 1)
        config = FitConfig(global_family="negbin", tol=1e-9, rel_tol=0.0)
        base = fit_global(GlobalData(y, X, np.zeros(300)), config)
        doubled = fit_global(GlobalData(y, X, np.full(300, math.log(2.0))), config)
        self.assertAlmostEqual(doubled.spec.beta_omega[0], base.spec.beta_omega[0] - math.log(2.0), places=6)
        np.testing.assert_allclose(doubled.spec.beta_omega[1:], base.spec.beta_omega[1:], atol=1e-6)
        self.assertAlmostEqual(doubled.loglik, base.loglik, places=6)

    def test_auto_prefers_negbin_on_overdispersed_totals(self):
        rng = np.random.default_rng(13)
        y = rng.negative_binomial(1.0, 0.05, 400)
        fit = fit_global(GlobalData(y, np.ones((400, 1)), np.zeros(400)), FitConfig(global_family="auto"))
        self.assertEqual(fit.spec.family, "negbin")
        self.assertEqual(len(fit.candidates), 2)


class TestOptimizer(unittest.TestCase):
    def test_quadratic(self):
        target = np.array([1.0, -2.0, 0.5])

        def fun(x):
            diff = x - target
            return -2.0 * float(diff @ diff), -4.0 * diff

        report = maximize(fun, np.zeros(3))
        self.assertTrue(report.converged)
        self.assertLessEqual(report.n_iter, 3)
        self.assertLess(report.grad_norm, 1e-6)
        np.testing.assert_allclose(report.coef, target, atol=1e-6)

    def test_binomial_closed_form(self):
        rng = np.random.default_rng(21)
        n = rng.poisson(15, 80) + 1
        n1 = rng.binomial(n, 0.35)
        data = NodeData.build(n1, n, np.ones((80, 1)))
        spec = NodeRegSpec("binomial", [0.0])
        report = maximize(lambda c: node_loglik(spec.unpack(c), data), spec.pack(), STRICT)
        self.assertAlmostEqual(report.coef[0], logit(n1.sum() / n.sum()), delta=1e-8)

    def test_beta_binomial_reaches_optimum(self):
        rng = np.random.default_rng(7)
        data = simulate_split_data(rng, 1000, np.array([0.2, -0.6, 0.4]), sigma=0.3)
        spec = NodeRegSpec("betabinomial", np.zeros(3), delta=[0.0])

        def fun(coef):
            return node_loglik(spec.unpack(coef), data)

        report = maximize(fun, spec.pack())
        reference = maximize(fun, spec.pack(), STRICT)
        self.assertTrue(report.converged)
        self.assertLess(report.grad_norm, 0.1)
        self.assertAlmostEqual(report.loglik, reference.loglik, delta=1e-3)
        np.testing.assert_allclose(report.coef, reference.coef, atol=1e-2)

    def test_non_finite_start(self):
        with self.assertRaises(OptimizationError):
            maximize(lambda x: (-np.inf, np.zeros_like(x)), np.zeros(2))

    def test_non_finite_region_is_stepped_back_from(self):
        def fun(x):
            if x[0] <= 0:
                return -np.inf, np.full(1, np.nan)
            return math.log(x[0]) - 10.0 * x[0], np.array([1.0 / x[0] - 10.0])

        report = maximize(fun, np.array([1.0]))
        self.assertTrue(report.converged)
        self.assertAlmostEqual(report.coef[0], 0.1, delta=1e-5)

    def test_non_finite_everywhere_but_start(self):
        def fun(x):
            if np.all(x == 0):
                return 0.0, np.ones_like(x)
            return -np.inf, np.zeros_like(x)

        with self.assertRaises(OptimizationError):
            maximize(fun, np.zeros(2))

    def test_never_decreases(self):
        def fun(x):
            return -float(np.sum(x ** 4)), -4.0 * x ** 3

        start = np.array([3.0, -1.0])
        report = maximize(fun, start)
        self.assertGreaterEqual(report.loglik, fun(start)[0])

    def test_standard_errors_binomial(self):
        rng = np.random.default_rng(5)
        n = np.full(200, 10)
        n1 = rng.binomial(n, 0.5)
        data = NodeData.build(n1, n, np.ones((200, 1)))
        spec = NodeRegSpec("binomial", [0.0])
        report = maximize(lambda c: node_loglik(spec.unpack(c), data), spec.pack(), STRICT)
        p = expit(report.coef[0])
        se = standard_errors(lambda c: node_loglik(spec.unpack(c), data), report.coef)
        self.assertAlmostEqual(se[0], 1.0 / math.sqrt(n.sum() * p * (1 - p)), places=6)


class TestCriteria(unittest.TestCase):
    def test_aic(self):
        self.assertEqual(aic(0.0, 0), 0.0)
        self.assertAlmostEqual(aic(-10.0, 4) - aic(-10.0, 3), 2.0)

    def test_bic(self):
        self.assertAlmostEqual(bic(-10.0, 2, 100), 20.0 + 2 * math.log(100))


class TestSelection(unittest.TestCase):
    def test_reference_group_symmetry(self):
        rng = np.random.default_rng(17)
        data = simulate_split_data(rng, 400, np.array([0.3, -0.6, 0.2]), sigma=0.2)
        config = FitConfig(families=("betabinomial",), zi_sides=("none",), tol=1e-9, rel_tol=0.0)
        fit = select_node_model(data, config)
        swapped = select_node_model(data.swapped(), config)
        np.testing.assert_allclose(swapped.spec.beta, -fit.spec.beta, atol=1e-5)
        np.testing.assert_allclose(swapped.spec.delta, fit.spec.delta, atol=1e-5)
        self.assertAlmostEqual(swapped.loglik, fit.loglik, delta=1e-8)

    def test_candidate_grid(self):
        rng = np.random.default_rng(18)
        data = simulate_split_data(rng, 300, np.array([0.0, 0.5, -0.5]))
        fit = select_node_model(data, FitConfig())
        self.assertEqual(len(fit.candidates), 6)
        self.assertEqual({(c.family, c.zi_side) for c in fit.candidates},
                         {(f, s) for f in ("binomial", "betabinomial") for s in ("none", "side1", "side2")})
        best = min(c.aic for c in fit.candidates)
        self.assertLessEqual(fit.aic, best + 1e-6)
        self.assertEqual(len(fit.se), fit.n_params)

    def test_no_observations_falls_back(self):
        data = NodeData.build([0, 0], [0, 0], np.ones((2, 3)))
        fit = select_node_model(data)
        self.assertTrue(fit.flagged)
        self.assertEqual(fit.spec.family, "binomial")
        self.assertEqual(len(fit.spec.beta), 1)

    def test_fallback_spec(self):
        data = NodeData.build([3, 1], [4, 4], np.ones((2, 1)))
        fit = fallback_node_fit(data, "forced")
        self.assertTrue(fit.flagged)
        self.assertAlmostEqual(fit.spec.beta[0], logit(4.5 / 9.0))

    def test_structural_zeros_detected(self):
        rng = np.random.default_rng(19)
        data = simulate_split_data(rng, 1000, np.array([0.2, 0.4, 0.0]), pi1=0.4)
        fit = select_node_model(data, FitConfig(families=("binomial",)))
        self.assertEqual(fit.spec.zi_side, "side1")
        self.assertAlmostEqual(float(expit(fit.spec.b[0])), 0.4, delta=0.06)

    @pytest.mark.slow
    def test_overdispersion_prefers_beta_binomial(self):
        rng = np.random.default_rng(20)
        chosen = 0
        for _ in range(20):
            data = simulate_split_data(rng, 1000, np.array([0.0, 0.5, -0.3]), sigma=0.3)
            chosen += select_node_model(data).spec.family == "betabinomial"
        self.assertGreaterEqual(chosen, 18)

    @pytest.mark.slow
    def test_plain_binomial_mostly_selected(self):
        # boundary candidates win by chance at a rate near 0.08 each under AIC
        rng = np.random.default_rng(22)
        chosen = 0
        replicates = 40
        for _ in range(replicates):
            data = simulate_split_data(rng, 1000, np.array([0.1, -0.4, 0.3]))
            spec = select_node_model(data).spec
            chosen += spec.family == "binomial" and spec.zi_side == "none"
        self.assertGreaterEqual(chosen, int(0.6 * replicates))

    @pytest.mark.slow
    def test_beta_binomial_recovery(self):
        rng = np.random.default_rng(23)
        beta = np.array([0.3, -0.5, 0.25])
        sigma = 0.25
        data = simulate_split_data(rng, 5000, beta, sigma=sigma)
        config = FitConfig(families=("betabinomial",), zi_sides=("none",))
        fit = select_node_model(data, config)
        self.assertTrue(np.all(np.abs(fit.spec.beta - beta) < 3 * fit.se[:3]))
        self.assertLess(abs(fit.spec.delta[0] - math.log(sigma)), 3 * fit.se[3])


if __name__ == "__main__":
    unittest.main()
