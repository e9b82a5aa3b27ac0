import re
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from utils.errors import DomainError, NewickParseError, TreeStructureError

logger = logging.getLogger(__name__)

NodeRef = Union[int, str]


@dataclass(frozen=True)
class TreeNode:
    """One node of a partition tree; internal nodes have exactly two children"""
    index: int
    label: Optional[str]
    parent: Optional[int]
    children: Tuple[int, ...]
    length: Optional[float] = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


class PartitionTree:
    """Rooted binary partition tree over species labels

    Nodes are indexed in pre-order (root = 0) so every parent index is smaller
    than its children's. Leaf order is the order of first appearance.
    """

    def __init__(self, nodes: Sequence[TreeNode]):
        self.nodes: Tuple[TreeNode, ...] = tuple(nodes)
        self._validate()
        self.leaf_names: Tuple[str, ...] = tuple(
            node.label for node in self.nodes if node.is_leaf)
        self._leaf_node: Dict[str, int] = {
            node.label: node.index for node in self.nodes if node.is_leaf}
        self._leaf_position: Dict[int, int] = {
            self._leaf_node[name]: pos for pos, name in enumerate(self.leaf_names)}

    def _validate(self) -> None:
        if not self.nodes or self.nodes[0].parent is not None:
            raise TreeStructureError("tree must start with a root node")
        seen: Set[str] = set()
        for position, node in enumerate(self.nodes):
            if node.index != position:
                raise TreeStructureError(f"node index {node.index} out of pre-order")
            if node.is_leaf:
                if not node.label:
                    raise TreeStructureError(f"leaf {node.index} has no species label")
                if node.label in seen:
                    raise TreeStructureError(f"duplicate leaf label '{node.label}'")
                seen.add(node.label)
            elif len(node.children) != 2:
                raise TreeStructureError(
                    f"node {node.index} has {len(node.children)} children; "
                    "partition trees must be binary")
            for child in node.children:
                if self.nodes[child].parent != node.index or child <= node.index:
                    raise TreeStructureError(f"inconsistent parent link at node {child}")
        if len(seen) < 2:
            raise TreeStructureError("a partition tree needs at least two species")

    # Basic structure

    @property
    def root(self) -> int:
        return 0

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_names)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def internal_nodes(self) -> Tuple[int, ...]:
        return tuple(node.index for node in self.nodes if not node.is_leaf)

    def resolve(self, node: NodeRef) -> int:
        """Node index for an index or a leaf label"""
        if isinstance(node, str):
            if node not in self._leaf_node:
                raise DomainError(f"unknown species label '{node}'")
            return self._leaf_node[node]
        index = int(node)
        if not 0 <= index < self.n_nodes:
            raise DomainError(f"node index {index} out of range")
        return index

    def is_leaf(self, node: NodeRef) -> bool:
        return self.nodes[self.resolve(node)].is_leaf

    def children(self, node: NodeRef) -> Tuple[int, ...]:
        return self.nodes[self.resolve(node)].children

    def parent(self, node: NodeRef) -> Optional[int]:
        return self.nodes[self.resolve(node)].parent

    def sibling(self, node: NodeRef) -> int:
        index = self.resolve(node)
        parent = self.nodes[index].parent
        if parent is None:
            raise DomainError("the root has no sibling")
        first, second = self.nodes[parent].children
        return second if index == first else first

    def leaf_node(self, name: str) -> int:
        return self.resolve(name)

    def leaf_position(self, node: NodeRef) -> int:
        """Column of a leaf in count matrices ordered like leaf_names"""
        index = self.resolve(node)
        if index not in self._leaf_position:
            raise DomainError(f"node {index} is not a leaf")
        return self._leaf_position[index]

    def node_name(self, node: NodeRef) -> str:
        index = self.resolve(node)
        label = self.nodes[index].label
        return label if label else f"N{index}"

    @cached_property
    def _labels(self) -> Tuple[FrozenSet[str], ...]:
        sets: List[FrozenSet[str]] = [frozenset()] * self.n_nodes
        for node in reversed(self.nodes):
            if node.is_leaf:
                sets[node.index] = frozenset([node.label])
            else:
                sets[node.index] = sets[node.children[0]] | sets[node.children[1]]
        return tuple(sets)

    def labels(self, node: NodeRef) -> FrozenSet[str]:
        """Species label set of a node"""
        return self._labels[self.resolve(node)]

    def leaves_under(self, node: NodeRef) -> List[str]:
        members = self.labels(node)
        return [name for name in self.leaf_names if name in members]

    def clades(self) -> Set[FrozenSet[str]]:
        """Label sets of all internal nodes (topology fingerprint)"""
        return {self._labels[i] for i in self.internal_nodes}

    # Paths

    def ancestors(self, node: NodeRef) -> List[int]:
        """Path from a child of the root down to the node, inclusive; empty for the root"""
        index = self.resolve(node)
        path = []
        while self.nodes[index].parent is not None:
            path.append(index)
            index = self.nodes[index].parent
        return path[::-1]

    def depth(self, node: NodeRef) -> int:
        return len(self.ancestors(node))

    def separator(self, leaf_i: NodeRef, leaf_j: NodeRef) -> Tuple[int, int, int]:
        """Youngest common ancestor S of two leaves and its children towards each

        Returns:
            Tuple (S, S_i, S_j)
        """
        i, j = self.resolve(leaf_i), self.resolve(leaf_j)
        if i == j:
            raise DomainError("separator needs two distinct leaves")
        path_i = [self.root] + self.ancestors(i)
        path_j = [self.root] + self.ancestors(j)
        depth = 0
        while (depth < min(len(path_i), len(path_j))
               and path_i[depth] == path_j[depth]):
            depth += 1
        if depth >= len(path_i) or depth >= len(path_j):
            raise DomainError("separator is only defined between leaves")
        return path_i[depth - 1], path_i[depth], path_j[depth]

    def separator_path(self, leaf_i: NodeRef, leaf_j: NodeRef) -> List[int]:
        """Ancestors of leaf_i that are not ancestors of leaf_j"""
        shared = set(self.ancestors(leaf_j))
        return [b for b in self.ancestors(leaf_i) if b not in shared]

    # Data helpers

    def group_totals(self, counts: np.ndarray) -> np.ndarray:
        """Per-node group sums |y_B| in one post-order sweep

        Args:
            counts: I x J matrix with columns ordered like leaf_names

        Returns:
            I x n_nodes matrix
        """
        counts = np.asarray(counts)
        if counts.ndim == 1:
            counts = counts[np.newaxis, :]
        if counts.shape[1] != self.n_leaves:
            raise DomainError(
                f"count vectors have {counts.shape[1]} entries, tree has {self.n_leaves} leaves")
        totals = np.zeros((counts.shape[0], self.n_nodes), dtype=counts.dtype)
        for node in reversed(self.nodes):
            if node.is_leaf:
                totals[:, node.index] = counts[:, self._leaf_position[node.index]]
            else:
                totals[:, node.index] = (totals[:, node.children[0]]
                                         + totals[:, node.children[1]])
        return totals

    def to_newick(self, internal_labels: bool = True, lengths: bool = True) -> str:
        def render(index: int) -> str:
            node = self.nodes[index]
            if node.is_leaf:
                text = _quote(node.label)
            else:
                text = "(" + ",".join(render(c) for c in node.children) + ")"
                if internal_labels:
                    text += _quote(self.node_name(index))
            if lengths and node.length is not None:
                text += f":{node.length!r}"
            return text
        return render(self.root) + ";"

    def __repr__(self):
        return f"PartitionTree({self.to_newick(internal_labels=False, lengths=False)})"


def _quote(label: str) -> str:
    if re.search(r"[(),:;\s']", label):
        return "'" + label.replace("'", "''") + "'"
    return label


################################################################################
## Newick parsing

_TOKENIZER = re.compile(r"'(?:[^']|'')*'|[(),:;]|[^(),:;'\s]+|\s+")


class _Clade:
    def __init__(self, name, length, children, offset):
        self.name = name
        self.length = length
        self.children = children
        self.offset = offset

    def leaf_names(self) -> List[str]:
        if not self.children:
            return [self.name]
        return [n for child in self.children for n in child.leaf_names()]


class _NewickReader:
    def __init__(self, text: str):
        self.text = text
        self.tokens: List[Tuple[str, int]] = []
        for match in _TOKENIZER.finditer(text):
            token = match.group(0)
            if token.isspace():
                continue
            self.tokens.append((token, match.start()))
        self.pos = 0

    def byte_offset(self, char_offset: int) -> int:
        return len(self.text[:char_offset].encode("utf-8"))

    def peek(self) -> Optional[str]:
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def offset(self) -> int:
        if self.pos < len(self.tokens):
            return self.byte_offset(self.tokens[self.pos][1])
        return len(self.text.encode("utf-8"))

    def take(self) -> str:
        token = self.tokens[self.pos][0]
        self.pos += 1
        return token

    def error(self, message: str) -> NewickParseError:
        return NewickParseError(message, self.offset())

    def parse(self) -> _Clade:
        clade = self.clade()
        if self.peek() == ")":
            raise self.error("unbalanced parentheses: unexpected ')'")
        if self.peek() != ";":
            raise self.error("missing terminating ';'")
        self.take()
        if self.peek() is not None:
            raise self.error("unexpected text after ';'")
        return clade

    def clade(self) -> _Clade:
        offset = self.offset()
        children = []
        if self.peek() == "(":
            self.take()
            children.append(self.clade())
            while self.peek() == ",":
                self.take()
                children.append(self.clade())
            if self.peek() != ")":
                raise self.error("unbalanced parentheses: expected ')'")
            self.take()
        name, length = None, None
        if self.peek() not in (None, "(", ")", ",", ":", ";"):
            name = _unquote(self.take())
        if self.peek() == ":":
            self.take()
            token = self.peek()
            if token is None or token in "(),:;":
                raise self.error("missing branch length value")
            try:
                length = float(self.take())
            except ValueError:
                self.pos -= 1
                raise self.error("branch length is not a number")
        if not children and not name:
            raise NewickParseError("leaf without a species label", offset)
        return _Clade(name, length, children, offset)


def _unquote(token: str) -> str:
    if len(token) >= 2 and token[0] == "'" and token[-1] == "'":
        return token[1:-1].replace("''", "'")
    return token


def _build(root: _Clade) -> PartitionTree:
    nodes: List[TreeNode] = []
    seen: Set[str] = set()

    def visit(clade: _Clade, parent: Optional[int]) -> int:
        if clade.children and len(clade.children) != 2:
            members = ",".join(clade.leaf_names())
            raise TreeStructureError(
                f"node ({members}) has {len(clade.children)} children; "
                "partition trees must be binary")
        if not clade.children:
            if clade.name in seen:
                raise TreeStructureError(f"duplicate leaf label '{clade.name}'")
            seen.add(clade.name)
        index = len(nodes)
        nodes.append(None)
        children = tuple(visit(child, index) for child in clade.children)
        nodes[index] = TreeNode(index, clade.name, parent, children, clade.length)
        return index

    visit(root, None)
    return PartitionTree(nodes)


def parse_newick(text: str) -> PartitionTree:
    """Parse a binary Newick tree

    Args:
        text: Newick string terminated by ';'

    Returns:
        PartitionTree with leaves in order of first appearance; branch lengths
        and internal labels are kept as metadata
    """
    reader = _NewickReader(text.strip())
    if reader.peek() is None:
        raise NewickParseError("empty Newick text", 0)
    return _build(reader.parse())


def read_newick(path: str) -> PartitionTree:
    with open(path, "r", encoding="utf-8") as f:
        return parse_newick(f.read())


def emit_newick(tree: PartitionTree, internal_labels: bool = True) -> str:
    return tree.to_newick(internal_labels=internal_labels)


def ancestors(tree: PartitionTree, node: NodeRef) -> List[int]:
    return tree.ancestors(node)


def separator(tree: PartitionTree, leaf_i: NodeRef, leaf_j: NodeRef) -> Tuple[int, int, int]:
    return tree.separator(leaf_i, leaf_j)


def _from_nested(nested) -> PartitionTree:
    def to_clade(item) -> _Clade:
        if isinstance(item, tuple):
            return _Clade(None, None, [to_clade(child) for child in item], 0)
        return _Clade(str(item), None, [], 0)
    return _build(to_clade(nested))


def sequential_tree(order: Iterable) -> PartitionTree:
    """Caterpillar tree splitting off one species at a time, in the given order

    The generalized Dirichlet-multinomial split is this tree with beta-binomial
    splits everywhere.
    """
    labels = [str(label) for label in order]
    if len(labels) < 2:
        raise TreeStructureError("a partition tree needs at least two species")
    nested = labels[-1]
    for label in reversed(labels[:-1]):
        nested = (label, nested)
    return _from_nested(nested)


def balanced_tree(labels: Iterable) -> PartitionTree:
    """Binary tree halving the label list at every split"""
    labels = [str(label) for label in labels]
    if len(labels) < 2:
        raise TreeStructureError("a partition tree needs at least two species")

    def split(items):
        if len(items) == 1:
            return items[0]
        mid = (len(items) + 1) // 2
        return (split(items[:mid]), split(items[mid:]))
    return _from_nested(split(labels))
