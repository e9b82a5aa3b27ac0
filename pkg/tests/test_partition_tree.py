import os
import tempfile
import unittest

import numpy as np

from tests.oracles import random_tree
from trees.partition_tree import (
    ancestors, balanced_tree, emit_newick, parse_newick, read_newick, separator, sequential_tree,
)
from utils.errors import DomainError, NewickParseError, TreeStructureError


class TestParseNewick(unittest.TestCase):
    def setUp(self):
        self.tree = parse_newick("((a,b),c);")

    def test_clades(self):
        self.assertEqual(self.tree.clades(), {frozenset("abc"), frozenset("ab")})
        self.assertEqual(self.tree.leaf_names, ("a", "b", "c"))
        self.assertEqual(self.tree.n_nodes, 5)
        self.assertEqual(self.tree.root, 0)

    def test_branch_lengths_kept(self):
        tree = parse_newick("((a:1.2,b:0.3):0.5,c:2.0);")
        self.assertEqual(tree.clades(), self.tree.clades())
        self.assertEqual(tree.nodes[tree.leaf_node("a")].length, 1.2)
        self.assertEqual(tree.nodes[1].length, 0.5)

    def test_internal_labels(self):
        tree = parse_newick("((a,b)Quercus,c)root;")
        self.assertEqual(tree.node_name(1), "Quercus")
        self.assertEqual(tree.node_name(0), "root")
        self.assertEqual(self.tree.node_name(1), "N1")

    def test_quoted_labels(self):
        tree = parse_newick("('Fagus sylvatica',('it''s',c));")
        self.assertEqual(tree.leaf_names, ("Fagus sylvatica", "it's", "c"))

    def test_polytomy_rejected(self):
        with self.assertRaises(TreeStructureError) as ctx:
            parse_newick("(a,b,c);")
        self.assertIn("3 children", str(ctx.exception))
        with self.assertRaises(TreeStructureError) as ctx:
            parse_newick("((a,b,c),d);")
        self.assertIn("(a,b,c)", str(ctx.exception))

    def test_duplicate_leaf(self):
        with self.assertRaises(TreeStructureError):
            parse_newick("((a,b),a);")

    def test_unbalanced_offsets(self):
        with self.assertRaises(NewickParseError) as ctx:
            parse_newick("((a,b),c;")
        self.assertEqual(ctx.exception.offset, 8)
        with self.assertRaises(NewickParseError) as ctx:
            parse_newick("((a,b),c));")
        self.assertEqual(ctx.exception.offset, 9)

    def test_offset_counts_bytes(self):
        with self.assertRaises(NewickParseError) as ctx:
            parse_newick("((é,b),c;")
        self.assertEqual(ctx.exception.offset, 9)

    def test_missing_semicolon(self):
        with self.assertRaises(NewickParseError):
            parse_newick("((a,b),c)")
        with self.assertRaises(NewickParseError):
            parse_newick("")

    def test_read_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "tree.nwk")
            with open(path, "w", encoding="utf-8") as f:
                f.write("((a,b),c);\n")
            self.assertEqual(read_newick(path).clades(), self.tree.clades())


class TestPaths(unittest.TestCase):
    def setUp(self):
        self.tree = parse_newick("((a,b),c);")

    def test_ancestors(self):
        ab = 1
        self.assertEqual(ancestors(self.tree, ab), [ab])
        self.assertEqual(ancestors(self.tree, "a"), [ab, self.tree.leaf_node("a")])
        self.assertEqual(ancestors(self.tree, self.tree.root), [])

    def test_separator(self):
        a, b, c = (self.tree.leaf_node(x) for x in "abc")
        self.assertEqual(separator(self.tree, "a", "b"), (1, a, b))
        self.assertEqual(separator(self.tree, "a", "c"), (0, 1, c))
        with self.assertRaises(DomainError):
            separator(self.tree, "a", "a")

    def test_separator_path(self):
        self.assertEqual(self.tree.separator_path("a", "b"), [self.tree.leaf_node("a")])

    def test_sibling_and_leaves_under(self):
        a, c = self.tree.leaf_node("a"), self.tree.leaf_node("c")
        self.assertEqual(self.tree.sibling(a), self.tree.leaf_node("b"))
        self.assertEqual(self.tree.sibling(1), c)
        self.assertEqual(self.tree.leaves_under(1), ["a", "b"])
        with self.assertRaises(DomainError):
            self.tree.sibling(self.tree.root)

    def test_path_properties_on_random_trees(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            tree = random_tree(int(rng.integers(2, 9)), rng)
            for node in tree.internal_nodes:
                first, second = tree.children(node)
                self.assertEqual(tree.labels(first) | tree.labels(second), tree.labels(node))
                self.assertFalse(tree.labels(first) & tree.labels(second))
            for i in tree.leaf_names:
                for j in tree.leaf_names:
                    if i == j:
                        continue
                    shared = set(tree.ancestors(i)) & set(tree.ancestors(j))
                    self.assertEqual(len(shared) + len(tree.separator_path(i, j)), len(tree.ancestors(i)))
                    sep, sep_i, sep_j = tree.separator(i, j)
                    on_both = [b for b in [tree.root] + tree.ancestors(i)
                               if b == tree.root or b in shared]
                    self.assertEqual(sep, on_both[-1])
                    self.assertIn(sep_i, tree.ancestors(i))
                    self.assertIn(sep_j, tree.ancestors(j))


class TestConstructors(unittest.TestCase):
    def test_sequential(self):
        tree = sequential_tree([1, 2, 3])
        self.assertEqual(tree.clades(), {frozenset("123"), frozenset("23")})
        self.assertEqual(tree.leaf_names, ("1", "2", "3"))

    def test_sequential_two_species(self):
        tree = sequential_tree(["x", "y"])
        self.assertEqual(tree.internal_nodes, (0,))

    def test_caterpillar_depth(self):
        labels = [f"s{j}" for j in range(1, 8)]
        tree = sequential_tree(labels)
        self.assertEqual(tree.depth(labels[-1]), len(labels) - 1)

    def test_balanced(self):
        tree = balanced_tree(list("abcd"))
        self.assertEqual(tree.clades(), {frozenset("abcd"), frozenset("ab"), frozenset("cd")})

    def test_too_few_species(self):
        with self.assertRaises(TreeStructureError):
            sequential_tree(["only"])

    def test_emit_parse_round_trip(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            tree = random_tree(int(rng.integers(2, 10)), rng)
            again = parse_newick(emit_newick(tree))
            self.assertEqual(again.clades(), tree.clades())
            self.assertEqual(again.leaf_names, tree.leaf_names)


class TestGroupTotals(unittest.TestCase):
    def test_sums(self):
        tree = parse_newick("((a,b),c);")
        counts = np.array([[1, 2, 3], [0, 0, 5]])
        totals = tree.group_totals(counts)
        np.testing.assert_array_equal(totals[:, 0], [6, 5])
        np.testing.assert_array_equal(totals[:, 1], [3, 0])
        np.testing.assert_array_equal(totals[:, tree.leaf_node("c")], [3, 5])

    def test_wrong_width(self):
        tree = parse_newick("((a,b),c);")
        with self.assertRaises(DomainError):
            tree.group_totals(np.zeros((2, 4)))


if __name__ == "__main__":
    unittest.main()
