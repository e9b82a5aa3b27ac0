import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config.settings import FitConfig
from evaluation.metrics import mae_log1p, rmse
from regression.fit_engine import ZtpsRegressionFitter, predict_mean
from trees.partition_tree import PartitionTree
from utils.data_io import Dataset
from utils.errors import DataError


@dataclass
class FoldAssignment:
    """Fold label in 1..K for every site"""
    labels: pd.Series

    def __post_init__(self):
        labels = self.labels
        if labels.isna().any():
            raise DataError("every site needs a fold label")
        values = labels.astype(np.int64)
        folds = sorted(set(values.tolist()))
        if len(folds) < 2:
            raise DataError("cross-validation needs at least two folds")
        if folds != list(range(1, len(folds) + 1)):
            raise DataError(f"fold labels must be 1..K with every fold non-empty, got {folds}")
        self.labels = values

    @property
    def folds(self) -> List[int]:
        return sorted(set(self.labels.tolist()))

    @property
    def k(self) -> int:
        return len(self.folds)

    def mask(self, fold: int) -> np.ndarray:
        return (self.labels == fold).values


@dataclass
class FoldResult:
    fold: int
    mae_log1p: float
    rmse: float
    n_sites: int
    flagged_nodes: List[str] = field(default_factory=list)


@dataclass
class CvReport:
    """Held-out accuracy per fold with site-weighted and fold-averaged aggregates"""
    folds: List[FoldResult]

    @property
    def n_sites(self) -> int:
        return sum(f.n_sites for f in self.folds)

    @property
    def weighted_mae(self) -> float:
        return float(sum(f.mae_log1p * f.n_sites for f in self.folds) / self.n_sites)

    @property
    def weighted_rmse(self) -> float:
        """Pooled RMSE over all held-out cells"""
        return float(np.sqrt(sum(f.rmse ** 2 * f.n_sites for f in self.folds) / self.n_sites))

    @property
    def mean_mae(self) -> float:
        return float(np.mean([f.mae_log1p for f in self.folds]))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean([f.rmse for f in self.folds]))

    @property
    def flagged(self) -> Dict[int, List[str]]:
        return {f.fold: f.flagged_nodes for f in self.folds if f.flagged_nodes}

    def to_frame(self) -> pd.DataFrame:
        """Rows MAE_log1p, RMSE, n_sites; columns fold labels, then weighted and mean"""
        columns = {}
        for f in self.folds:
            columns[f"fold{f.fold}"] = [f.mae_log1p, f.rmse, f.n_sites]
        columns["weighted"] = [self.weighted_mae, self.weighted_rmse, self.n_sites]
        columns["mean"] = [self.mean_mae, self.mean_rmse, self.n_sites / len(self.folds)]
        return pd.DataFrame(columns, index=pd.Index(["MAE_log1p", "RMSE", "n_sites"], name="metric"))


class CrossValidator:
    """Fits on all folds but one and scores predictions on the held-out fold"""

    def __init__(self, config: Optional[FitConfig] = None, parallel_folds: bool = False):
        self.config = config or FitConfig()
        self.parallel_folds = parallel_folds
        self.logger = logging.getLogger(self.__class__.__name__)

    def _run_fold(self, dataset: Dataset, tree: PartitionTree, folds: FoldAssignment, fold: int) -> FoldResult:
        held_out = folds.mask(fold)
        train = dataset.subset(~held_out)
        test = dataset.subset(held_out)
        fitted = ZtpsRegressionFitter(self.config).fit(train, tree)
        test = test.aligned_to(tree.leaf_names).sorted_by_site()
        predicted = predict_mean(fitted, test.covariates.values.astype(float), test.offsets.values)
        observed = test.counts.values
        result = FoldResult(fold, mae_log1p(observed, predicted), rmse(observed, predicted),
                            test.n_sites, fitted.flagged_nodes)
        self.logger.info(f"Fold {fold}: MAE_log1p={result.mae_log1p:.6f}, RMSE={result.rmse:.6f}, "
                         f"sites={result.n_sites}")
        if result.flagged_nodes:
            self.logger.warning(f"Fold {fold}: flagged nodes {', '.join(result.flagged_nodes)}")
        return result

    def run(self, dataset: Dataset, tree: PartitionTree, folds: FoldAssignment) -> CvReport:
        if not folds.labels.index.equals(dataset.site_ids):
            folds = FoldAssignment(folds.labels.reindex(dataset.site_ids))
        if self.parallel_folds and self.config.threads > 1:
            with ThreadPoolExecutor(max_workers=self.config.threads) as executor:
                results = list(executor.map(lambda k: self._run_fold(dataset, tree, folds, k), folds.folds))
        else:
            results = [self._run_fold(dataset, tree, folds, k) for k in folds.folds]
        report = CvReport(results)
        self.logger.info(f"Cross-validation over {folds.k} folds: weighted MAE_log1p="
                         f"{report.weighted_mae:.6f}, RMSE={report.weighted_rmse:.6f}")
        return report


def cross_validate(dataset: Dataset, tree: PartitionTree, folds: FoldAssignment,
                   config: Optional[FitConfig] = None) -> CvReport:
    return CrossValidator(config).run(dataset, tree, folds)
