import math
import unittest

import numpy as np
import pytest
from scipy import stats

from distributions.polya import (
    NegativeBinomialLaw, PoissonLaw, PolyaKind, SplitTheta, log_split_pmf, polya_split_covariance,
)
from distributions.ztps import (
    NodeSplitParams, ZtpsModel, covariance, covariance_matrix, factorial_moment,
    group_factorial_moment, log_joint_pmf, log_zi_split_pmf, marginal_zero_prob, mean_vector, sample,
)
from tests.oracles import compositions, enumerate_model, falling, random_model
from trees.partition_tree import parse_newick, sequential_tree
from utils.errors import DomainError

BINOMIAL_HALF = NodeSplitParams(SplitTheta(1, 1), PolyaKind.BINOMIAL)


def three_species(params_root, params_ab, law):
    tree = parse_newick("((a,b),c);")
    return ZtpsModel(tree, {0: params_root, 1: params_ab}, law)


class TestZeroInflatedSplit(unittest.TestCase):
    def test_empty_split(self):
        params = NodeSplitParams(SplitTheta(2, 3), PolyaKind.BETA_BINOMIAL, 0.3, 0.4)
        self.assertEqual(log_zi_split_pmf(0, 0, params), 0.0)

    def test_hand_value(self):
        params = NodeSplitParams(SplitTheta(1, 1), PolyaKind.BINOMIAL, 0.2, 0.1)
        self.assertAlmostEqual(log_zi_split_pmf(0, 5, params), math.log(0.221875), places=12)

    def test_normalized(self):
        params = NodeSplitParams(SplitTheta(1, 1), PolyaKind.BINOMIAL, 0.2, 0.1)
        n1 = np.arange(6)
        self.assertAlmostEqual(np.exp(log_zi_split_pmf(n1, 5 - n1, params)).sum(), 1.0, delta=1e-12)

    def test_reduces_without_inflation(self):
        theta = SplitTheta(0.8, 2.2)
        params = NodeSplitParams(theta, PolyaKind.BETA_BINOMIAL)
        n1 = np.arange(10)
        np.testing.assert_array_equal(log_zi_split_pmf(n1, 9 - n1, params),
                                      log_split_pmf(n1, 9 - n1, theta, 1))

    def test_invalid_pi(self):
        with self.assertRaises(DomainError):
            NodeSplitParams(SplitTheta(1, 1), PolyaKind.BINOMIAL, 0.7, 0.5)
        with self.assertRaises(DomainError):
            NodeSplitParams(SplitTheta(1, 1), PolyaKind.BINOMIAL, -0.1, 0.0)


class TestJointPmf(unittest.TestCase):
    def test_all_zero(self):
        model = three_species(BINOMIAL_HALF, BINOMIAL_HALF, PoissonLaw(2.5))
        self.assertAlmostEqual(log_joint_pmf([0, 0, 0], model), -2.5, places=12)

    def test_length_mismatch(self):
        model = three_species(BINOMIAL_HALF, BINOMIAL_HALF, PoissonLaw(2.5))
        with self.assertRaises(DomainError):
            log_joint_pmf([1, 2], model)
        with self.assertRaises(DomainError):
            log_joint_pmf([1, -2, 0], model)

    def test_missing_split(self):
        with self.assertRaises(DomainError):
            ZtpsModel(parse_newick("((a,b),c);"), {0: BINOMIAL_HALF}, PoissonLaw(1.0))

    def test_multinomial_poisson_closure(self):
        """Multinomial splits of a Poisson total give independent Poisson species"""
        rate = 4.0
        model = three_species(BINOMIAL_HALF, BINOMIAL_HALF, PoissonLaw(rate))
        ys = compositions(3, 15)
        rates = np.array([rate / 4, rate / 4, rate / 2])
        expected = stats.poisson.logpmf(ys, rates).sum(axis=1)
        self.assertLess(np.max(np.abs(log_joint_pmf(ys, model) - expected)), 1e-10)

    def test_sequential_tree_matches_generalized_dirichlet_multinomial(self):
        order = ["a", "b", "c", "d"]
        tree = sequential_tree(order)
        thetas = {0: (1.3, 2.0), 2: (0.7, 1.1), 4: (2.5, 0.4)}
        splits = {node: NodeSplitParams(SplitTheta(*thetas[node]), PolyaKind.BETA_BINOMIAL)
                  for node in tree.internal_nodes}
        law = NegativeBinomialLaw(size=3.0, mean=6.0)
        model = ZtpsModel(tree, splits, law)
        rng = np.random.default_rng(1)
        for _ in range(20):
            y = rng.integers(0, 6, size=4)
            expected = stats.nbinom.logpmf(y.sum(), 3.0, law.p)
            remaining = y.sum()
            for level, node in enumerate(tree.internal_nodes):
                a, b = thetas[node]
                expected += stats.betabinom.logpmf(y[level], remaining, a, b)
                remaining -= y[level]
            self.assertAlmostEqual(log_joint_pmf(y, model), expected, delta=1e-11)


class TestMoments(unittest.TestCase):
    def test_single_split_mean(self):
        tree = parse_newick("(a,b);")
        params = NodeSplitParams(SplitTheta.from_proportion(0.3, 0.5), PolyaKind.BINOMIAL)
        model = ZtpsModel(tree, {0: params}, PoissonLaw(10.0))
        self.assertAlmostEqual(factorial_moment("a", 1, model), 3.0, places=12)
        np.testing.assert_allclose(mean_vector(model), [3.0, 7.0], rtol=1e-12)

    def test_sibling_always_empty(self):
        tree = parse_newick("(a,b);")
        params = NodeSplitParams(SplitTheta(1, 1), PolyaKind.BETA_BINOMIAL, 0.0, 1.0)
        law = NegativeBinomialLaw(size=2.0, mean=5.0)
        model = ZtpsModel(tree, {0: params}, law)
        for k in (1, 2, 3):
            self.assertAlmostEqual(factorial_moment("a", k, model), law.factorial_moment(k))
            self.assertEqual(factorial_moment("b", k, model), 0.0)

    def test_invalid_order(self):
        model = three_species(BINOMIAL_HALF, BINOMIAL_HALF, PoissonLaw(2.0))
        with self.assertRaises(DomainError):
            factorial_moment("a", 0, model)
        with self.assertRaises(DomainError):
            factorial_moment(1, 1, model)

    def test_negative_binomial_enumeration(self):
        beta = NodeSplitParams(SplitTheta(1.5, 0.8), PolyaKind.BETA_BINOMIAL)
        beta_ab = NodeSplitParams(SplitTheta(0.6, 2.1), PolyaKind.BETA_BINOMIAL)
        model = three_species(beta, beta_ab, NegativeBinomialLaw(size=8.0, mean=3.0))
        ys, probs = enumerate_model(model, 70)
        for j, name in enumerate(model.tree.leaf_names):
            for k in (1, 2):
                self.assertAlmostEqual((probs * falling(ys[:, j], k)).sum(),
                                       factorial_moment(name, k, model), delta=1e-8)

    def test_conditional_expectation_recursion(self):
        """Group total pmfs pushed down node by node give the same moments"""
        top = 40
        totals = np.arange(top + 1)
        for seed in range(4):
            model = random_model(5, np.random.default_rng(seed))
            tree = model.tree
            marginal = {tree.root: np.exp(model.global_law.log_pmf(totals))}
            for node in tree.internal_nodes:
                params = model.splits[node]
                first, second = tree.children(node)
                marginal[first] = np.zeros(top + 1)
                marginal[second] = np.zeros(top + 1)
                for n, weight in enumerate(marginal[node]):
                    n1 = np.arange(n + 1)
                    split = np.exp(log_split_pmf(n1, n - n1, params.theta, params.kind))
                    given = (1.0 - params.pi_total) * split
                    given[0] += params.pi1
                    given[n] += params.pi2
                    marginal[first][:n + 1] += weight * given
                    marginal[second][:n + 1] += weight * given[::-1]
            for name in tree.leaf_names:
                pmf = marginal[tree.leaf_node(name)]
                for k in (1, 2, 3):
                    self.assertAlmostEqual((pmf * falling(totals, k)).sum(),
                                           factorial_moment(name, k, model), delta=1e-10)

    def test_group_moment_at_root(self):
        law = PoissonLaw(3.0, zi_pi=0.25)
        model = three_species(BINOMIAL_HALF, BINOMIAL_HALF, law)
        self.assertAlmostEqual(group_factorial_moment(0, 2, model), 0.75 * 9.0)


class TestStructuralZeros(unittest.TestCase):
    def test_no_inflation(self):
        model = three_species(BINOMIAL_HALF, BINOMIAL_HALF, PoissonLaw(2.0))
        self.assertEqual(marginal_zero_prob("a", model), 0.0)

    def test_product_over_ancestors(self):
        root = NodeSplitParams(SplitTheta(1, 1), PolyaKind.BINOMIAL, 0.1, 0.0)
        ab = NodeSplitParams(SplitTheta(1, 1), PolyaKind.BINOMIAL, 0.2, 0.0)
        model = three_species(root, ab, PoissonLaw(2.0))
        self.assertAlmostEqual(marginal_zero_prob("a", model), 0.28, places=12)
        self.assertAlmostEqual(marginal_zero_prob("b", model), 0.1, places=12)
        self.assertEqual(marginal_zero_prob("c", model), 0.0)


class TestCovariance(unittest.TestCase):
    def test_multinomial_poisson_null(self):
        model = three_species(BINOMIAL_HALF, NodeSplitParams(SplitTheta(1, 3), PolyaKind.BINOMIAL),
                              PoissonLaw(5.0))
        cov = covariance_matrix(model)
        off_diagonal = cov[~np.eye(3, dtype=bool)]
        np.testing.assert_allclose(off_diagonal, 0.0, atol=1e-12)
        np.testing.assert_allclose(np.diag(cov), mean_vector(model), rtol=1e-12)

    def test_reduces_to_split_covariance(self):
        theta = SplitTheta(1.2, 2.7)
        law = NegativeBinomialLaw(size=4.0, mean=6.0)
        model = ZtpsModel(parse_newick("(a,b);"), {0: NodeSplitParams(theta, PolyaKind.BETA_BINOMIAL)}, law)
        expected = polya_split_covariance(theta, 1, law.factorial_moment(1), law.factorial_moment(2))
        self.assertAlmostEqual(covariance("a", "b", model), expected, delta=1e-12)

    def test_sibling_sign_follows_dispersion_of_the_split_total(self):
        tree = parse_newick("((a,b),c);")
        root = NodeSplitParams(SplitTheta(1, 1), PolyaKind.BINOMIAL)
        theta = SplitTheta(1.5, 2.5)
        cases = [
            (PolyaKind.BINOMIAL, PoissonLaw(6.0), 0),
            (PolyaKind.BINOMIAL, NegativeBinomialLaw(size=2.0, mean=6.0), 1),
            (PolyaKind.BINOMIAL, PoissonLaw(6.0, zi_pi=0.2), 1),
            (PolyaKind.BETA_BINOMIAL, PoissonLaw(6.0), -1),
            (PolyaKind.BETA_BINOMIAL, NegativeBinomialLaw(size=2.0, mean=6.0), 1),
            (PolyaKind.BETA_BINOMIAL, NegativeBinomialLaw(size=8.0, mean=6.0), -1),
        ]
        for kind, law, sign in cases:
            model = ZtpsModel(tree, {0: root, 1: NodeSplitParams(theta, kind)}, law)
            mu1 = group_factorial_moment(1, 1, model)
            mu2 = group_factorial_moment(1, 2, model)
            s = theta.total
            criterion = s * mu2 - (s + kind.c) * mu1 ** 2
            value = covariance("a", "b", model)
            if sign == 0:
                self.assertAlmostEqual(value, 0.0, delta=1e-12)
                self.assertAlmostEqual(criterion, 0.0, delta=1e-10)
            else:
                self.assertEqual(np.sign(value), sign, f"{kind.name} under {law.family}")
                self.assertEqual(np.sign(criterion), sign)

    def test_symmetric(self):
        model = random_model(4, np.random.default_rng(12))
        cov = covariance_matrix(model)
        np.testing.assert_array_equal(cov, cov.T)

    def test_requires_leaves(self):
        model = three_species(BINOMIAL_HALF, BINOMIAL_HALF, PoissonLaw(2.0))
        with self.assertRaises(DomainError):
            covariance(1, "c", model)


class TestEnumerationOracle(unittest.TestCase):
    """Random models checked against brute-force sums over the truncated support"""

    MAX_TOTAL = 25

    def test_random_models(self):
        rng = np.random.default_rng(2023)
        for trial in range(50):
            n_leaves = (2, 3, 4)[trial % 3]
            model = random_model(n_leaves, rng, zero_inflated=trial % 5 != 0)
            ys, probs = enumerate_model(model, self.MAX_TOTAL)
            retained = np.exp(model.global_law.log_pmf(np.arange(self.MAX_TOTAL + 1))).sum()
            self.assertAlmostEqual(probs.sum(), retained, delta=1e-10)

            names = model.tree.leaf_names
            for j, name in enumerate(names):
                for k in (1, 2):
                    self.assertAlmostEqual((probs * falling(ys[:, j], k)).sum(),
                                           factorial_moment(name, k, model), delta=1e-8)
                zero_mass = probs[ys[:, j] == 0].sum()
                self.assertGreaterEqual(zero_mass + 1e-12, marginal_zero_prob(name, model))

            means = (probs[:, None] * ys).sum(axis=0)
            for a in range(n_leaves):
                for b in range(a, n_leaves):
                    empirical = (probs * (ys[:, a] - means[a]) * (ys[:, b] - means[b])).sum()
                    self.assertAlmostEqual(empirical, covariance(names[a], names[b], model), delta=1e-6)


class TestSample(unittest.TestCase):
    def test_shapes(self):
        model = random_model(3, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        self.assertEqual(sample(model, rng).shape, (3,))
        self.assertEqual(sample(model, rng, size=7).shape, (7, 3))

    def test_first_group_emptied(self):
        root = NodeSplitParams(SplitTheta(1, 1), PolyaKind.BETA_BINOMIAL, 1.0, 0.0)
        model = three_species(root, BINOMIAL_HALF, PoissonLaw(20.0))
        draws = sample(model, np.random.default_rng(5), size=2000)
        self.assertEqual(draws[:, :2].sum(), 0)
        self.assertGreater(draws[:, 2].sum(), 0)

    def test_reproducible(self):
        model = random_model(4, np.random.default_rng(3))
        first = sample(model, np.random.default_rng(99), size=50)
        second = sample(model, np.random.default_rng(99), size=50)
        np.testing.assert_array_equal(first, second)

    @pytest.mark.slow
    def test_moments_match(self):
        tree = parse_newick("((a,b),(c,d));")
        splits = {
            0: NodeSplitParams(SplitTheta(2.0, 1.5), PolyaKind.BETA_BINOMIAL, 0.1, 0.05),
            1: NodeSplitParams(SplitTheta(1.0, 1.0), PolyaKind.BINOMIAL, 0.0, 0.2),
            4: NodeSplitParams(SplitTheta(0.7, 1.9), PolyaKind.BETA_BINOMIAL, 0.15, 0.0),
        }
        model = ZtpsModel(tree, splits, NegativeBinomialLaw(size=3.0, mean=12.0, zi_pi=0.1))
        draws = 1_000_000
        ys = sample(model, np.random.default_rng(31), size=draws).astype(float)
        for j, name in enumerate(tree.leaf_names):
            for k in (1, 2):
                values = falling(ys[:, j], k)
                se = values.std() / math.sqrt(draws)
                self.assertLess(abs(values.mean() - factorial_moment(name, k, model)), 4 * se)
        means = ys.mean(axis=0)
        for a in range(4):
            for b in range(a + 1, 4):
                products = (ys[:, a] - means[a]) * (ys[:, b] - means[b])
                se = products.std() / math.sqrt(draws)
                expected = covariance(tree.leaf_names[a], tree.leaf_names[b], model)
                self.assertLess(abs(products.mean() - expected), 4 * se)


if __name__ == "__main__":
    unittest.main()
