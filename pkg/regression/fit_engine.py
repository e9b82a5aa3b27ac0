"""Full regression fit over a partition tree, prediction and size effects.

The log-likelihood splits into a global term and one term per internal node,
so the fit is one GLM for the total plus independent per-node selections run
in a thread pool. Results are always assembled in node order.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from config.settings import FitConfig
from distributions.polya import NegativeBinomialLaw, PoissonLaw, PolyaKind, SplitTheta
from distributions.ztps import NodeSplitParams, ZtpsModel
from regression.likelihoods import GlobalData, NodeData
from regression.selection import GlobalFit, NodeFit, fallback_node_fit, fit_global, select_node_model
from trees.partition_tree import PartitionTree
from utils.data_io import Dataset, add_intercept
from utils.errors import DataError, DomainError

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


@dataclass(frozen=True)
class FitTotals:
    loglik: float
    aic: float
    bic: float
    n_params: int


class FittedZtpsRegression:
    """Fitted global GLM plus one selected split regression per internal node

    Args:
        tree: Partition tree the model lives on
        covariate_names: Raw covariate names, intercept excluded
        global_fit: Fitted global abundance GLM
        node_fits: NodeFit per internal node index
        covariate_means: Mean covariate row of the training data
    """

    def __init__(self, tree: PartitionTree, covariate_names: Sequence[str], global_fit: GlobalFit,
                 node_fits: Dict[int, NodeFit], covariate_means: Optional[Sequence[float]] = None):
        missing = set(tree.internal_nodes) - set(node_fits)
        if missing:
            raise DomainError(f"no split regression for internal nodes {sorted(missing)}")
        self.tree = tree
        self.covariate_names = list(covariate_names)
        self.global_fit = global_fit
        self.node_fits = {node: node_fits[node] for node in tree.internal_nodes}
        if covariate_means is None:
            covariate_means = np.zeros(len(self.covariate_names))
        self.covariate_means = np.asarray(covariate_means, dtype=float)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def totals(self) -> FitTotals:
        parts = [self.global_fit] + list(self.node_fits.values())
        return FitTotals(loglik=sum(part.loglik for part in parts),
                         aic=sum(part.aic for part in parts),
                         bic=sum(part.bic for part in parts),
                         n_params=sum(part.n_params for part in parts))

    @property
    def flagged_nodes(self) -> List[str]:
        return [self.tree.node_name(node) for node, fit in self.node_fits.items() if fit.flagged]

    def design(self, rows: Optional[np.ndarray] = None) -> np.ndarray:
        """Design matrix for raw covariate rows; the mean row when None"""
        if rows is None:
            rows = self.covariate_means[None, :]
        rows = np.asarray(rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.shape[1] != self.n_covariates:
            raise DomainError(f"expected {self.n_covariates} covariates per row, got {rows.shape[1]}")
        return add_intercept(rows)

    def split_model(self, row: Optional[Sequence[float]] = None, offset: float = 1.0) -> ZtpsModel:
        """Static model with every parameter evaluated at one covariate row"""
        X = self.design(row)
        splits = {}
        for node, fit in self.node_fits.items():
            params = fit.spec.split_parameters(X)
            p1 = float(np.clip(params["p1"][0], 1e-12, 1 - 1e-12))
            if params["sigma"] is None:
                theta, kind = SplitTheta(p1, 1.0 - p1), PolyaKind.BINOMIAL
            else:
                theta = SplitTheta(float(params["theta1"][0]), float(params["theta2"][0]))
                kind = PolyaKind.BETA_BINOMIAL
            splits[node] = NodeSplitParams(theta, kind, float(params["pi1"][0]), float(params["pi2"][0]))
        spec = self.global_fit.spec
        mean = float(spec.mean(X, np.log([offset]))[0])
        zi_pi = float(spec.zero_pi(X)[0])
        if spec.family == "poisson":
            law = PoissonLaw(mean, zi_pi)
        else:
            law = NegativeBinomialLaw(spec.size, mean, zi_pi)
        return ZtpsModel(self.tree, splits, law)

    def selection_table(self) -> pd.DataFrame:
        """One row per internal node with the chosen model and all candidate AICs"""
        records = []
        for node, fit in self.node_fits.items():
            first, second = self.tree.children(node)
            record = {
                "node": node,
                "node_name": self.tree.node_name(node),
                "first_child": self.tree.node_name(first),
                "second_child": self.tree.node_name(second),
                "n_obs": fit.n_obs,
                "family": fit.spec.family,
                "zi_side": fit.spec.zi_side,
                "loglik": fit.loglik,
                "n_params": fit.n_params,
                "aic": fit.aic,
                "bic": fit.bic,
                "converged": fit.converged,
                "flagged": fit.flagged,
            }
            for candidate in fit.candidates:
                record[f"aic_{candidate.family}_{candidate.zi_side}"] = candidate.aic
            records.append(record)
        return pd.DataFrame(records)

    def differentiation_table(self) -> pd.DataFrame:
        """Split coefficients beta per internal node; positive values favour the first child"""
        terms = ["intercept"] + self.covariate_names
        records = []
        for node, fit in self.node_fits.items():
            first, second = self.tree.children(node)
            for position, value in enumerate(fit.spec.beta):
                se = fit.se[position] if len(fit.se) > position else np.nan
                records.append({
                    "node": node,
                    "node_name": self.tree.node_name(node),
                    "term": terms[position],
                    "beta": value,
                    "se": se,
                    "z": value / se if se > 0 else np.nan,
                    "favours": self.tree.node_name(first if value > 0 else second) if value != 0 else "",
                })
        return pd.DataFrame(records)

    def __repr__(self):
        totals = self.totals
        return (f"FittedZtpsRegression(leaves={self.tree.n_leaves}, covariates={self.n_covariates}, "
                f"loglik={totals.loglik:.4f}, n_params={totals.n_params})")


def check_full_rank(X: np.ndarray, names: Sequence[str]) -> None:
    """Raise DataError naming the columns that add nothing to the column span"""
    if np.linalg.matrix_rank(X, tol=None) == X.shape[1]:
        return
    collinear = []
    kept = np.zeros((X.shape[0], 0))
    for position, name in enumerate(names):
        candidate = np.column_stack([kept, X[:, position]])
        if np.linalg.matrix_rank(candidate) > kept.shape[1]:
            kept = candidate
        else:
            collinear.append(name)
    raise DataError(f"covariate matrix is rank deficient; collinear columns: {collinear}")


def node_datasets(tree: PartitionTree, counts: np.ndarray, X: np.ndarray,
                  site_ids: Optional[Sequence] = None) -> Dict[int, NodeData]:
    """Split observations of every internal node from one group-total sweep"""
    totals = tree.group_totals(np.asarray(counts, dtype=np.int64))
    data = {}
    for node in tree.internal_nodes:
        first = tree.children(node)[0]
        data[node] = NodeData.build(totals[:, first], totals[:, node], X, site_ids)
    return data


class ZtpsRegressionFitter:
    """Fits the global GLM and every node, the nodes in parallel"""

    def __init__(self, config: Optional[FitConfig] = None):
        self.config = config or FitConfig()
        self.logger = logging.getLogger(self.__class__.__name__)

    def _fit_node(self, tree: PartitionTree, node: int, data: NodeData) -> NodeFit:
        name = tree.node_name(node)
        try:
            return select_node_model(data, self.config, name)
        except Exception as e:
            self.logger.warning(f"node {name}: selection failed ({e}), using fallback")
            return fallback_node_fit(data, f"selection failed: {e}")

    def fit(self, dataset: Dataset, tree: PartitionTree) -> FittedZtpsRegression:
        dataset = dataset.aligned_to(tree.leaf_names).sorted_by_site()
        X = dataset.design_matrix()
        check_full_rank(X, ["intercept"] + dataset.covariate_names)
        counts = dataset.counts.values
        self.logger.info(f"Fitting {tree.n_leaves} species over {dataset.n_sites} sites "
                         f"with {len(dataset.covariate_names)} covariates")

        totals = counts.sum(axis=1)
        global_fit = fit_global(GlobalData(totals, X, dataset.log_offsets()), self.config)
        self.logger.info(f"Global {global_fit.spec.label()}: loglik={global_fit.loglik:.4f}")

        per_node = node_datasets(tree, counts, X, np.asarray(dataset.site_ids))
        nodes = list(tree.internal_nodes)
        if self.config.threads > 1:
            with ThreadPoolExecutor(max_workers=self.config.threads) as executor:
                fits = list(executor.map(lambda node: self._fit_node(tree, node, per_node[node]), nodes))
        else:
            fits = [self._fit_node(tree, node, per_node[node]) for node in nodes]

        node_fits = dict(zip(nodes, fits))
        for node, fit in node_fits.items():
            self.logger.info(f"Node {tree.node_name(node)}: {fit.spec.label()} "
                             f"(n_obs={fit.n_obs}, AIC={fit.aic:.4f})")
        fitted = FittedZtpsRegression(tree, dataset.covariate_names, global_fit, node_fits,
                                      dataset.covariates.values.astype(float).mean(axis=0)
                                      if dataset.covariate_names else None)
        if fitted.flagged_nodes:
            self.logger.warning(f"Flagged fallback nodes: {', '.join(fitted.flagged_nodes)}")
        totals = fitted.totals
        self.logger.info(f"Total loglik={totals.loglik:.4f}, AIC={totals.aic:.4f}, "
                         f"BIC={totals.bic:.4f}, parameters={totals.n_params}")
        return fitted


def fit(dataset: Dataset, tree: PartitionTree, config: Optional[FitConfig] = None) -> FittedZtpsRegression:
    return ZtpsRegressionFitter(config).fit(dataset, tree)


def _node_shares(fitted: FittedZtpsRegression, X: np.ndarray, covariate: Optional[int] = None):
    """Per node: zero-inflated mean shares of both children and their x-derivatives

    covariate is the design column index the derivatives are taken in.
    """
    shares = {}
    for node, fit in fitted.node_fits.items():
        spec = fit.spec
        params = spec.split_parameters(X)
        p1, pi1, pi2 = params["p1"], params["pi1"], params["pi2"]
        keep = 1.0 - pi1 - pi2
        share1 = pi2 + keep * p1
        share2 = pi1 + keep * (1.0 - p1)
        d1 = d2 = np.zeros(len(X))
        if covariate is not None:
            dp1 = spec.beta[covariate] * p1 * expit(-params["eta"]) if covariate < len(spec.beta) \
                else np.zeros(len(X))
            dpi1 = np.zeros(len(X))
            dpi2 = np.zeros(len(X))
            if spec.b is not None and covariate < len(spec.b):
                pi = pi1 if spec.zi_side == "side1" else pi2
                dpi = spec.b[covariate] * pi * (1.0 - pi)
                if spec.zi_side == "side1":
                    dpi1 = dpi
                else:
                    dpi2 = dpi
            d1 = dpi2 + keep * dp1 - (dpi1 + dpi2) * p1
            d2 = dpi1 - keep * dp1 - (dpi1 + dpi2) * (1.0 - p1)
        shares[node] = (share1, share2, d1, d2)
    return shares


def _root_mean(fitted: FittedZtpsRegression, X: np.ndarray, log_offset: np.ndarray,
               covariate: Optional[int] = None):
    spec = fitted.global_fit.spec
    mu = spec.mean(X, log_offset)
    pi = spec.zero_pi(X)
    mean = (1.0 - pi) * mu
    if covariate is None:
        return mean, np.zeros(len(X))
    d_mean = np.zeros(len(X))
    if covariate < len(spec.beta_omega):
        d_mean = mean * spec.beta_omega[covariate]
    if spec.zi_b is not None and covariate < len(spec.zi_b):
        d_mean = d_mean - spec.zi_b[covariate] * pi * (1.0 - pi) * mu
    return mean, d_mean


def _log_offsets(offsets, n_rows: int) -> np.ndarray:
    if offsets is None:
        return np.zeros(n_rows)
    offsets = np.broadcast_to(np.asarray(offsets, dtype=float), (n_rows,))
    if np.any(offsets <= 0):
        raise DomainError("offsets must be positive")
    return np.log(offsets)


def group_means(fitted: FittedZtpsRegression, rows: Optional[np.ndarray] = None, offsets=None,
                covariate: Optional[int] = None):
    """Expected group totals at every node, optionally with their derivative

    Args:
        fitted: Fitted model
        rows: Raw covariate rows (m x p); the training mean row when None
        offsets: Sampling effort per row, 1 when None
        covariate: Raw covariate position to differentiate in, or None

    Returns:
        (means, derivatives), each of shape (m, number of tree nodes)
    """
    X = fitted.design(rows)
    tree = fitted.tree
    column = None if covariate is None else covariate + 1
    means = np.zeros((len(X), tree.n_nodes))
    effects = np.zeros((len(X), tree.n_nodes))
    means[:, tree.root], effects[:, tree.root] = _root_mean(fitted, X, _log_offsets(offsets, len(X)), column)
    shares = _node_shares(fitted, X, column)
    # pre-order indexing puts every parent before its children
    for node in tree.internal_nodes:
        first, second = tree.children(node)
        share1, share2, d1, d2 = shares[node]
        means[:, first] = means[:, node] * share1
        means[:, second] = means[:, node] * share2
        effects[:, first] = effects[:, node] * share1 + means[:, node] * d1
        effects[:, second] = effects[:, node] * share2 + means[:, node] * d2
    return means, effects


def predict_mean(fitted: FittedZtpsRegression, rows: Optional[np.ndarray] = None, offsets=None) -> np.ndarray:
    """Expected count of every species, columns in tree leaf order

    Returns:
        Array of shape (m, J); a single row gives shape (1, J)
    """
    means, _ = group_means(fitted, rows, offsets)
    leaves = [fitted.tree.leaf_node(name) for name in fitted.tree.leaf_names]
    return means[:, leaves]


def predict_frame(fitted: FittedZtpsRegression, rows: pd.DataFrame, offsets=None) -> pd.DataFrame:
    values = predict_mean(fitted, rows[fitted.covariate_names].values, offsets)
    return pd.DataFrame(values, index=rows.index, columns=fitted.tree.leaf_names)


@dataclass
class EffectTable:
    """Size effects and relative size effects per node, covariate and row

    Columns: row, covariate, node, node_name, is_leaf, mu, effect, rse
    """
    frame: pd.DataFrame

    def leaves(self) -> pd.DataFrame:
        return self.frame[self.frame["is_leaf"]].reset_index(drop=True)

    def for_covariate(self, name: str) -> pd.DataFrame:
        return self.frame[self.frame["covariate"] == name].reset_index(drop=True)


def size_effects(fitted: FittedZtpsRegression, rows: Optional[np.ndarray] = None,
                 covariates: Optional[Sequence[Union[int, str]]] = None, offsets=None,
                 row_labels: Optional[Sequence] = None) -> EffectTable:
    """d mu(B) / d x_k and RSE = effect / mu(B) at every tree node

    Args:
        fitted: Fitted model
        rows: Raw covariate rows; the training mean row when None
        covariates: Names or positions; all covariates when None
        offsets: Sampling effort per row
        row_labels: Labels for the rows in the output
    """
    if covariates is None:
        covariates = list(range(fitted.n_covariates))
    positions = [fitted.covariate_names.index(c) if isinstance(c, str) else int(c) for c in covariates]
    n_rows = len(fitted.design(rows))
    if row_labels is None:
        row_labels = ["mean"] if rows is None else [f"row{i + 1}" for i in range(n_rows)]
    tree = fitted.tree
    names = [tree.node_name(node) for node in range(tree.n_nodes)]
    is_leaf = [tree.is_leaf(node) for node in range(tree.n_nodes)]

    frames = []
    for position in positions:
        means, effects = group_means(fitted, rows, offsets, position)
        with np.errstate(divide="ignore", invalid="ignore"):
            rse = np.where(means > 0, effects / np.where(means > 0, means, 1.0), np.nan)
        frames.append(pd.DataFrame({
            "row": np.repeat(np.asarray(row_labels, dtype=object), tree.n_nodes),
            "covariate": fitted.covariate_names[position],
            "node": np.tile(np.arange(tree.n_nodes), n_rows),
            "node_name": np.tile(names, n_rows),
            "is_leaf": np.tile(is_leaf, n_rows),
            "mu": means.ravel(),
            "effect": effects.ravel(),
            "rse": rse.ravel(),
        }))
    if not frames:
        return EffectTable(pd.DataFrame(columns=["row", "covariate", "node", "node_name",
                                                 "is_leaf", "mu", "effect", "rse"]))
    return EffectTable(pd.concat(frames, ignore_index=True))


def count_parameters(tree: Union[PartitionTree, int], p: int, split_family: str = "betabinomial",
                     global_family: str = "negbin", structure: str = "tree") -> int:
    """Parameter count of a non-inflated model

    Args:
        tree: Tree or number of species J
        p: Number of covariates, intercept excluded
        split_family: "binomial" or "betabinomial" at every node
        global_family: "poisson" or "negbin"
        structure: "tree" (binary splits), "flat" (one multivariate split of
            J categories) or "independent" (one GLM per species)
    """
    n_species = tree.n_leaves if isinstance(tree, PartitionTree) else int(tree)
    per_predictor = p + 1
    global_count = per_predictor + (1 if global_family == "negbin" else 0)
    if structure == "tree":
        per_node = 2 * per_predictor if split_family == "betabinomial" else per_predictor
        return (n_species - 1) * per_node + global_count
    if structure == "flat":
        return n_species * per_predictor + global_count
    if structure == "independent":
        return n_species * global_count
    raise DomainError(f"unknown model structure '{structure}'")
