"""Delimited-text input and output for count datasets.

Counts, covariates, offsets and folds are parallel tables keyed by the
``site_id`` column. Files ending in .tsv or .txt are tab separated, anything
else is comma separated. Leading lines starting with '#' are comments.
"""
import os
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.errors import DataError, TreeStructureError

logger = logging.getLogger(__name__)

SITE_COLUMN = "site_id"
FINGERPRINT_PREFIX = "# config_fingerprint:"


@dataclass
class Dataset:
    """Site by species counts with covariates, offsets and optional folds

    Args:
        counts: Non-negative integer counts, index site_id, one column per species
        covariates: Raw covariates without intercept, same index as counts
        offsets: Positive sampling efforts, same index as counts
        folds: Optional integer fold label per site
    """
    counts: pd.DataFrame
    covariates: pd.DataFrame
    offsets: pd.Series
    folds: Optional[pd.Series] = None

    def __post_init__(self):
        index = self.counts.index
        if not self.covariates.index.equals(index) or not self.offsets.index.equals(index):
            raise DataError("counts, covariates and offsets must share the same sites in the same order")
        if self.folds is not None and not self.folds.index.equals(index):
            raise DataError("fold labels must cover exactly the sites of the counts table")
        if index.has_duplicates:
            raise DataError(f"duplicate site ids: {sorted(index[index.duplicated()].astype(str))[:5]}")
        if (self.counts.values < 0).any():
            raise DataError("counts must be non-negative")
        if (self.offsets.values <= 0).any():
            raise DataError("offsets must be positive")

    @property
    def site_ids(self) -> pd.Index:
        return self.counts.index

    @property
    def species(self) -> List[str]:
        return [str(name) for name in self.counts.columns]

    @property
    def covariate_names(self) -> List[str]:
        return [str(name) for name in self.covariates.columns]

    @property
    def n_sites(self) -> int:
        return len(self.counts)

    def design_matrix(self) -> np.ndarray:
        """Covariates with a leading intercept column"""
        return add_intercept(self.covariates.values.astype(float))

    def log_offsets(self) -> np.ndarray:
        return np.log(self.offsets.values.astype(float))

    def subset(self, mask: Sequence[bool]) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        return Dataset(self.counts[mask], self.covariates[mask], self.offsets[mask],
                       None if self.folds is None else self.folds[mask])

    def sorted_by_site(self) -> "Dataset":
        order = np.argsort(self.site_ids.astype(str), kind="stable")
        return Dataset(self.counts.iloc[order], self.covariates.iloc[order], self.offsets.iloc[order],
                       None if self.folds is None else self.folds.iloc[order])

    def aligned_to(self, leaf_names: Sequence[str]) -> "Dataset":
        """Reorder species columns to the tree's leaf order

        Raises:
            TreeStructureError: listing the symmetric difference of the names
        """
        species = set(self.species)
        leaves = set(leaf_names)
        if species != leaves:
            raise TreeStructureError(
                f"tree leaves and count columns differ: only in tree {sorted(leaves - species)}, "
                f"only in counts {sorted(species - leaves)}")
        counts = self.counts.copy()
        counts.columns = self.species
        return Dataset(counts[list(leaf_names)], self.covariates, self.offsets, self.folds)


def add_intercept(covariates: np.ndarray) -> np.ndarray:
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates[None, :]
    return np.column_stack([np.ones(len(covariates)), covariates])


def _separator(path: str) -> str:
    return "\t" if os.path.splitext(path)[1].lower() in (".tsv", ".txt") else ","


def _comment_lines(path: str) -> int:
    count = 0
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            count += 1
    return count


def read_table(path: str) -> Tuple[pd.DataFrame, int]:
    """Read a delimited table as strings

    Returns:
        (frame, file line number of the first data row)
    """
    if not os.path.exists(path):
        raise DataError("file not found", path=path)
    skip = _comment_lines(path)
    try:
        frame = pd.read_csv(path, sep=_separator(path), skiprows=skip, dtype=str,
                            keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"cannot parse table: {e}", path=path)
    frame.columns = [str(column).strip() for column in frame.columns]
    return frame, skip + 2


def _numeric(frame: pd.DataFrame, path: str, first_line: int, integer: bool = False) -> pd.DataFrame:
    """Convert every column to numbers, reporting the first bad cell"""
    converted = {}
    for column in frame.columns:
        text = frame[column].str.strip()
        values = pd.to_numeric(text, errors="coerce")
        bad = values.isna()
        if integer and not bad.any():
            bad = values != np.floor(values)
        if bad.any():
            row = int(np.flatnonzero(bad.values)[0])
            kind = "an integer" if integer else "a number"
            raise DataError(f"value '{frame[column].iloc[row]}' is not {kind}",
                            path=path, line=first_line + row, column=column)
        # to_numeric may be off by an ulp; astype(float) parses exactly
        converted[column] = values.astype(np.int64) if integer else text.astype(float)
    return pd.DataFrame(converted, index=frame.index)


def _site_indexed(frame: pd.DataFrame, path: str, first_line: int) -> pd.DataFrame:
    if SITE_COLUMN in frame.columns:
        site_column = SITE_COLUMN
    else:
        site_column = frame.columns[0]
    sites = frame[site_column].str.strip()
    duplicated = sites.duplicated()
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.values)[0])
        raise DataError(f"duplicate site id '{sites.iloc[row]}'", path=path,
                        line=first_line + row, column=site_column)
    frame = frame.drop(columns=[site_column])
    frame.index = pd.Index(sites.values, name=SITE_COLUMN)
    return frame


def _parallel(frame: pd.DataFrame, sites: pd.Index, path: str) -> pd.DataFrame:
    missing = sites.difference(frame.index)
    if len(missing):
        raise DataError(f"no entry for sites {sorted(missing)[:5]}", path=path)
    extra = frame.index.difference(sites)
    if len(extra):
        logger.warning(f"{path}: ignoring {len(extra)} sites absent from the counts table")
    return frame.loc[sites]


def read_counts(path: str) -> pd.DataFrame:
    frame, first_line = read_table(path)
    if len(frame.columns) < 3:
        raise DataError("counts need a site_id column and at least two species", path=path)
    frame = _site_indexed(frame, path, first_line)
    counts = _numeric(frame, path, first_line, integer=True)
    negative = counts.values < 0
    if negative.any():
        row, col = (int(v[0]) for v in np.nonzero(negative))
        raise DataError("counts must be non-negative", path=path,
                        line=first_line + row, column=counts.columns[col])
    return counts


def read_covariates(path: Optional[str], sites: Optional[pd.Index] = None) -> pd.DataFrame:
    """Raw covariates parallel to the counts; an absent file means none

    With sites None every row of the file is returned in file order.
    """
    if path is None:
        return pd.DataFrame(index=sites)
    frame, first_line = read_table(path)
    frame = _numeric(_site_indexed(frame, path, first_line), path, first_line)
    return frame if sites is None else _parallel(frame, sites, path)


def read_offsets(path: Optional[str], sites: pd.Index) -> pd.Series:
    """Sampling efforts; 1 everywhere when no file is given"""
    if path is None:
        return pd.Series(np.ones(len(sites)), index=sites, name="offset")
    frame, first_line = read_table(path)
    frame = _numeric(_site_indexed(frame, path, first_line), path, first_line)
    if len(frame.columns) != 1:
        raise DataError("offsets need exactly one value column", path=path)
    column = frame.columns[0]
    bad = frame[column] <= 0
    if bad.any():
        row = int(np.flatnonzero(bad.values)[0])
        raise DataError("offsets must be positive", path=path, line=first_line + row, column=column)
    return _parallel(frame, sites, path)[column].rename("offset")


def read_folds(path: str, sites: pd.Index) -> pd.Series:
    if path is None:
        raise DataError("a fold file is required")
    frame, first_line = read_table(path)
    frame = _numeric(_site_indexed(frame, path, first_line), path, first_line, integer=True)
    if len(frame.columns) != 1:
        raise DataError("folds need exactly one label column", path=path)
    return _parallel(frame, sites, path)[frame.columns[0]].rename("fold")


def read_covariate_rows(path: str, names: Sequence[str]) -> pd.DataFrame:
    """Covariate rows at which predictions or effects are evaluated

    The file holds one column per covariate and an optional first label column.
    """
    frame, first_line = read_table(path)
    missing = [name for name in names if name not in frame.columns]
    if missing:
        raise DataError(f"missing covariate columns {missing}", path=path)
    labels = [c for c in frame.columns if c not in names]
    rows = _numeric(frame[list(names)], path, first_line)
    if labels:
        rows.index = pd.Index(frame[labels[0]].str.strip().values, name="row")
    else:
        rows.index = pd.Index([f"row{i + 1}" for i in range(len(rows))], name="row")
    return rows


def load_dataset(counts: str, covariates: Optional[str] = None, offsets: Optional[str] = None,
                 folds: Optional[str] = None) -> Dataset:
    count_table = read_counts(counts)
    sites = count_table.index
    dataset = Dataset(
        counts=count_table,
        covariates=read_covariates(covariates, sites),
        offsets=read_offsets(offsets, sites),
        folds=read_folds(folds, sites) if folds else None,
    )
    logger.info(f"Loaded {dataset.n_sites} sites, {len(dataset.species)} species, "
                f"{len(dataset.covariate_names)} covariates")
    return dataset


def write_table(frame: pd.DataFrame, path: str, fingerprint: Optional[str] = None,
                index: bool = True) -> str:
    """Write a delimited table preceded by the configuration fingerprint comment"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if fingerprint is not None:
            f.write(f"{FINGERPRINT_PREFIX} {fingerprint}\n")
        frame.to_csv(f, sep=_separator(path), index=index, float_format="%.17g",
                     lineterminator="\n")
    return path


def write_dataset(dataset: Dataset, out_dir: str, fingerprint: Optional[str] = None) -> List[str]:
    paths = [
        write_table(dataset.counts, os.path.join(out_dir, "counts.csv"), fingerprint),
        write_table(dataset.covariates, os.path.join(out_dir, "covariates.csv"), fingerprint),
        write_table(dataset.offsets.to_frame(), os.path.join(out_dir, "offsets.csv"), fingerprint),
    ]
    if dataset.folds is not None:
        paths.append(write_table(dataset.folds.to_frame(), os.path.join(out_dir, "folds.csv"), fingerprint))
    return paths


def read_fingerprint(path: str) -> Optional[str]:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    if first.startswith(FINGERPRINT_PREFIX):
        return first[len(FINGERPRINT_PREFIX):].strip()
    return None
