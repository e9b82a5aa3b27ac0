"""Tree Pólya-splitting distributions with zero-inflated binary splits.

A model is a partition tree, one split law per internal node and a global law
for the total count. The joint pmf factorizes over internal nodes, so every
quantity here is a product or sum along ancestor paths.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, NamedTuple, Optional, Union

import numpy as np

from distributions.polya import (
    ArrayLike, GlobalAbundanceLaw, PolyaKind, SplitTheta, as_kind, draw_split,
    log_split_pmf_arrays, split_moment_ratio,
)
from trees.partition_tree import NodeRef, PartitionTree
from utils.errors import DomainError

logger = logging.getLogger(__name__)

# Slack allowed on pi1 + pi2 <= 1
PI_SUM_SLACK = 1e-12


@dataclass(frozen=True)
class NodeSplitParams:
    """Zero-inflated split at one internal node

    pi1 is the probability that the first child group receives nothing,
    pi2 the same for the second child. pi1 = pi2 = 0 is a plain Pólya split.
    """
    theta: SplitTheta
    kind: PolyaKind = PolyaKind.BETA_BINOMIAL
    pi1: float = 0.0
    pi2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", as_kind(self.kind))
        self.theta.check_kind(self.kind)
        for name, value in (("pi1", self.pi1), ("pi2", self.pi2)):
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {value}")
        if self.pi1 + self.pi2 > 1.0 + PI_SUM_SLACK:
            raise DomainError(f"pi1 + pi2 must not exceed 1, got {self.pi1 + self.pi2}")

    @property
    def pi_total(self) -> float:
        return self.pi1 + self.pi2

    def _side(self, side: int):
        if side == 0:
            return self.theta.theta1, self.theta.theta2, self.pi1, self.pi2
        if side == 1:
            return self.theta.theta2, self.theta.theta1, self.pi2, self.pi1
        raise DomainError(f"side must be 0 or 1, got {side}")

    def proportion(self, side: int) -> float:
        """Mean share p of one child under the Pólya part only"""
        own, other, _, _ = self._side(side)
        return own / (own + other)

    def mean_share(self, side: int) -> float:
        """Zero-inflated mean share of one child group"""
        return self.factorial_share(side, 1)

    def factorial_share(self, side: int, k: int) -> float:
        """Factor applied to the k-th factorial moment of the parent total"""
        own, other, pi_own, pi_other = self._side(side)
        ratio = split_moment_ratio(own, other, k, self.kind)
        return pi_other + (1.0 - pi_own - pi_other) * ratio

    def swapped(self) -> "NodeSplitParams":
        return NodeSplitParams(self.theta.swapped(), self.kind, self.pi2, self.pi1)


class ZtpsModel:
    """Static-parameter zero-inflated tree Pólya-splitting model"""

    def __init__(self, tree: PartitionTree, splits: Mapping[int, NodeSplitParams],
                 global_law: GlobalAbundanceLaw):
        missing = set(tree.internal_nodes) - set(splits)
        extra = set(splits) - set(tree.internal_nodes)
        if missing or extra:
            raise DomainError(
                f"need one split per internal node; missing {sorted(missing)}, "
                f"not internal {sorted(extra)}")
        self.tree = tree
        self.splits: Dict[int, NodeSplitParams] = {b: splits[b] for b in tree.internal_nodes}
        self.global_law = global_law

    def _child_side(self, node: int):
        parent = self.tree.parent(node)
        side = 0 if self.tree.children(parent)[0] == node else 1
        return self.splits[parent], side

    def share(self, node: NodeRef, k: int = 1) -> float:
        """p~_B^(k) for a non-root node B"""
        index = self.tree.resolve(node)
        if index == self.tree.root:
            raise DomainError("the root has no share")
        params, side = self._child_side(index)
        return params.factorial_share(side, k)

    def structural_zero_pi(self, node: NodeRef) -> float:
        """pi_B, the probability that group B is emptied at its parent's split"""
        params, side = self._child_side(self.tree.resolve(node))
        return params.pi1 if side == 0 else params.pi2


def log_zi_split_pmf(n1: ArrayLike, n2: ArrayLike, params: NodeSplitParams) -> ArrayLike:
    """Log pmf of a zero-inflated split

    log[pi1 1{n1=0} + pi2 1{n2=0} + (1 - pi1 - pi2) P(n1, n2)]
    """
    n1 = np.asarray(n1, dtype=float)
    n2 = np.asarray(n2, dtype=float)
    if np.any(n1 < 0) or np.any(n2 < 0):
        raise DomainError("split counts must be non-negative")
    base = log_split_pmf_arrays(n1, n2, params.theta.theta1, params.theta.theta2, params.kind)
    with np.errstate(divide="ignore"):
        log_keep = np.log1p(-min(params.pi_total, 1.0))
        log_pi1 = np.log(params.pi1)
        log_pi2 = np.log(params.pi2)
    value = log_keep + base
    value = np.logaddexp(value, np.where(n1 == 0, log_pi1, -np.inf))
    value = np.logaddexp(value, np.where(n2 == 0, log_pi2, -np.inf))
    # every regime puts mass 1 on the empty split
    value = np.where((n1 == 0) & (n2 == 0), 0.0, value)
    return float(value) if value.ndim == 0 else value


def _check_counts(y: np.ndarray, tree: PartitionTree) -> np.ndarray:
    y = np.asarray(y)
    if y.shape[-1] != tree.n_leaves:
        raise DomainError(f"count vector has length {y.shape[-1]}, tree has {tree.n_leaves} leaves")
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise DomainError("counts must be non-negative integers")
    return y


def log_joint_pmf(y: ArrayLike, model: ZtpsModel) -> ArrayLike:
    """Log joint pmf of one count vector (or each row of a matrix)

    Args:
        y: Counts ordered like model.tree.leaf_names; shape (J,) or (I, J)
        model: The model

    Returns:
        Scalar for a vector, array of length I for a matrix
    """
    y = _check_counts(y, model.tree)
    totals = model.tree.group_totals(y.astype(np.int64))
    value = np.asarray(model.global_law.log_pmf(totals[:, model.tree.root]), dtype=float)
    for node in model.tree.internal_nodes:
        first, second = model.tree.children(node)
        value = value + log_zi_split_pmf(totals[:, first], totals[:, second], model.splits[node])
    return float(value[0]) if y.ndim == 1 else value


def group_factorial_moment(node: NodeRef, k: int, model: ZtpsModel) -> float:
    """k-th factorial moment of the group total |Y_B| of any node"""
    if k < 1:
        raise DomainError(f"factorial moment order must be >= 1, got {k}")
    moment = model.global_law.factorial_moment(k)
    for ancestor in model.tree.ancestors(node):
        moment *= model.share(ancestor, k)
    return moment


def factorial_moment(j: NodeRef, k: int, model: ZtpsModel) -> float:
    """k-th factorial moment E[Y_j (Y_j - 1) ... (Y_j - k + 1)] of species j"""
    if not model.tree.is_leaf(j):
        raise DomainError(f"node {j} is not a leaf")
    return group_factorial_moment(j, k, model)


def mean_vector(model: ZtpsModel) -> np.ndarray:
    return np.array([factorial_moment(name, 1, model) for name in model.tree.leaf_names])


def marginal_zero_prob(j: NodeRef, model: ZtpsModel) -> float:
    """Structural-zero weight p_j = 1 - prod_{B in A_j} (1 - pi_B) of species j

    P(Y_j = 0) also includes sampling zeros and is at least this value.
    """
    keep = 1.0
    for node in model.tree.ancestors(j):
        keep *= 1.0 - model.structural_zero_pi(node)
    return 1.0 - keep


def covariance(i: NodeRef, j: NodeRef, model: ZtpsModel) -> float:
    """Cov(Y_i, Y_j); the variance of Y_i when i and j coincide"""
    tree = model.tree
    i_idx, j_idx = tree.resolve(i), tree.resolve(j)
    if not (tree.is_leaf(i_idx) and tree.is_leaf(j_idx)):
        raise DomainError("covariance is defined between leaves")
    if i_idx == j_idx:
        mu1 = factorial_moment(i_idx, 1, model)
        return factorial_moment(i_idx, 2, model) + mu1 - mu1 ** 2

    sep, sep_i, sep_j = tree.separator(i_idx, j_idx)
    params = model.splits[sep]
    side_i = 0 if tree.children(sep)[0] == sep_i else 1
    mu1 = group_factorial_moment(sep, 1, model)
    mu2 = group_factorial_moment(sep, 2, model)
    s = params.theta.total
    cross = ((1.0 - params.pi_total) * params.proportion(side_i) * params.proportion(1 - side_i)
             * s / (s + params.kind.c) * mu2)
    group_cov = cross - params.mean_share(side_i) * params.mean_share(1 - side_i) * mu1 ** 2

    # thinning from S_i down to leaf i, excluding S_i itself
    damage = 1.0
    for node in tree.ancestors(i_idx)[tree.depth(sep_i):]:
        damage *= model.share(node)
    for node in tree.ancestors(j_idx)[tree.depth(sep_j):]:
        damage *= model.share(node)
    return damage * group_cov


def covariance_matrix(model: ZtpsModel) -> np.ndarray:
    names = model.tree.leaf_names
    size = len(names)
    cov = np.zeros((size, size))
    for a in range(size):
        for b in range(a, size):
            cov[a, b] = cov[b, a] = covariance(names[a], names[b], model)
    return cov


class SplitDraw(NamedTuple):
    """Split law at one node, each field a scalar or one value per draw"""
    theta1: ArrayLike
    theta2: ArrayLike
    kind: PolyaKind
    pi1: ArrayLike
    pi2: ArrayLike


def allocate(tree: PartitionTree, root_totals: np.ndarray, split_at: Callable[[int], SplitDraw],
             rng: np.random.Generator) -> np.ndarray:
    """Split root totals down the tree, one regime choice per node and draw

    Args:
        tree: Partition tree
        root_totals: Integer totals, one per draw
        split_at: Maps an internal node index to its split law
        rng: Caller-owned random generator

    Returns:
        Integer array (draws, J), columns in tree leaf order
    """
    root_totals = np.asarray(root_totals, dtype=np.int64)
    totals = np.zeros((len(root_totals), tree.n_nodes), dtype=np.int64)
    totals[:, tree.root] = root_totals
    for node in tree.internal_nodes:
        law = split_at(node)
        n = totals[:, node]
        u = rng.random(len(n))
        split = draw_split(n, law.theta1, law.theta2, law.kind, rng)
        n1 = np.where(u < law.pi1, 0, np.where(u < np.add(law.pi1, law.pi2), n, split))
        first, second = tree.children(node)
        totals[:, first] = n1
        totals[:, second] = n - n1
    return totals[:, [tree.leaf_node(name) for name in tree.leaf_names]]


def sample(model: ZtpsModel, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Draw count vectors top-down

    The total comes from the global law; each internal node then picks a
    regime (first child empty, second child empty, Pólya split) and allocates.

    Returns:
        Array of shape (J,) when size is None, otherwise (size, J)
    """
    draws = 1 if size is None else int(size)

    def split_at(node: int) -> SplitDraw:
        params = model.splits[node]
        return SplitDraw(params.theta.theta1, params.theta.theta2, params.kind, params.pi1, params.pi2)

    counts = allocate(model.tree, model.global_law.sample(draws, rng), split_at, rng)
    return counts[0] if size is None else counts
