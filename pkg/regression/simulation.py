import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logit

from distributions.polya import PolyaKind
from distributions.ztps import SplitDraw, allocate
from regression.fit_engine import FittedZtpsRegression
from regression.likelihoods import GlobalRegSpec, NodeRegSpec
from regression.selection import GlobalFit, NodeFit
from trees.partition_tree import PartitionTree
from utils.data_io import SITE_COLUMN, Dataset

logger = logging.getLogger(__name__)


def _true_fit(spec) -> dict:
    return {"spec": spec, "loglik": float("nan"), "n_obs": 0, "se": np.full(spec.n_params, np.nan),
            "message": "generated"}


def random_regression_model(tree: PartitionTree, n_covariates: int, rng: np.random.Generator,
                            coef_scale: float = 0.5, mean_total: float = 50.0, zi_nodes: int = 0,
                            zi_pi: float = 0.3, families: Sequence[str] = ("binomial", "betabinomial"),
                            global_family: str = "negbin", dispersion: float = 0.2,
                            sigma_range: Tuple[float, float] = (0.05, 0.5),
                            covariate_names: Optional[Sequence[str]] = None) -> FittedZtpsRegression:
    """Draw a regression model with known coefficients

    Args:
        tree: Partition tree
        n_covariates: Raw covariates p
        rng: Random generator
        coef_scale: Standard deviation of the slopes and split intercepts
        mean_total: Expected total abundance at the zero covariate row
        zi_nodes: Number of nodes given an intercept-only zero inflation
        zi_pi: Zero-inflation probability at those nodes
        families: Split families drawn uniformly per node
        global_family: "poisson" or "negbin"
        dispersion: 1/size of the negbin total
        sigma_range: Bounds of the beta-binomial sigma, drawn log-uniformly

    Returns:
        Model whose diagnostics (loglik, SEs) are NaN
    """
    names = list(covariate_names or [f"x{k + 1}" for k in range(n_covariates)])
    internal = list(tree.internal_nodes)
    inflated = set(rng.choice(internal, size=min(zi_nodes, len(internal)), replace=False).tolist())
    node_fits = {}
    for node in internal:
        family = families[int(rng.integers(len(families)))]
        beta = rng.normal(0.0, coef_scale, n_covariates + 1)
        delta = None
        if family == "betabinomial":
            delta = np.zeros(n_covariates + 1)
            delta[0] = rng.uniform(math.log(sigma_range[0]), math.log(sigma_range[1]))
        side, b = "none", None
        if node in inflated:
            side = "side1" if rng.random() < 0.5 else "side2"
            b = [float(logit(zi_pi))]
        spec = NodeRegSpec(family, beta, side, delta, b)
        node_fits[node] = NodeFit(**_true_fit(spec))

    beta_omega = np.concatenate([[math.log(mean_total)], rng.normal(0.0, coef_scale / 2, n_covariates)])
    spec = GlobalRegSpec(global_family, beta_omega,
                         math.log(dispersion) if global_family == "negbin" else None)
    global_fit = GlobalFit(spec=spec, loglik=float("nan"), n_obs=0, se=np.full(spec.n_params, np.nan))
    return FittedZtpsRegression(tree, names, global_fit, node_fits, np.zeros(n_covariates))


def simulate_counts(fitted: FittedZtpsRegression, rows: np.ndarray, rng: np.random.Generator,
                    offsets=None) -> np.ndarray:
    """Draw one count vector per covariate row, top-down through the tree

    Returns:
        Integer array (m, J), columns in tree leaf order
    """
    X = fitted.design(rows)
    m = len(X)
    log_offset = np.zeros(m) if offsets is None else np.log(np.asarray(offsets, dtype=float))
    spec = fitted.global_fit.spec
    mu = spec.mean(X, log_offset)
    if spec.family == "poisson":
        total = rng.poisson(mu)
    else:
        size = spec.size
        total = rng.negative_binomial(size, size / (size + mu))
    structural = rng.random(m) < spec.zero_pi(X)
    total = np.where(structural, 0, total)

    def split_at(node: int) -> SplitDraw:
        params = fitted.node_fits[node].spec.split_parameters(X)
        if params["sigma"] is None:
            p1 = params["p1"]
            return SplitDraw(p1, 1.0 - p1, PolyaKind.BINOMIAL, params["pi1"], params["pi2"])
        return SplitDraw(params["theta1"], params["theta2"], PolyaKind.BETA_BINOMIAL,
                         params["pi1"], params["pi2"])

    return allocate(fitted.tree, total, split_at, rng)


def simulate_dataset(fitted: FittedZtpsRegression, n_sites: int, seed: int,
                     n_folds: Optional[int] = None, vary_offsets: bool = False) -> Dataset:
    """Standard normal covariates and counts drawn from the model

    The same seed always gives the same dataset.
    """
    rng = np.random.default_rng(seed)
    covariates = rng.standard_normal((n_sites, fitted.n_covariates))
    offsets = rng.uniform(0.5, 2.0, n_sites) if vary_offsets else np.ones(n_sites)
    counts = simulate_counts(fitted, covariates, rng, offsets)
    index = pd.Index([f"site{i + 1:05d}" for i in range(n_sites)], name=SITE_COLUMN)
    folds = None
    if n_folds:
        folds = pd.Series(rng.permutation(np.arange(n_sites) % n_folds) + 1, index=index, name="fold")
    logger.info(f"Simulated {n_sites} sites from seed {seed}")
    return Dataset(
        counts=pd.DataFrame(counts, index=index, columns=list(fitted.tree.leaf_names)),
        covariates=pd.DataFrame(covariates, index=index, columns=fitted.covariate_names),
        offsets=pd.Series(offsets, index=index, name="offset"),
        folds=folds,
    )
