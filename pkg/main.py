import os
import sys
import logging
import argparse
from typing import List, Optional

import numpy as np
import pandas as pd

from config.settings import (
    DEFAULT_MAX_ITER, DEFAULT_SEED, DEFAULT_THREADS, DEFAULT_TOL, LOG_FILE, LOG_LEVEL,
    FitConfig, RunConfig,
)
from evaluation.cross_validation import FoldAssignment, cross_validate
from regression.fit_engine import EffectTable, fit, predict_frame, size_effects
from regression.serialization import load_model, save_model
from regression.simulation import random_regression_model, simulate_dataset
from reports.generator import ReportGenerator
from trees.partition_tree import balanced_tree, read_newick
from utils.data_io import (
    load_dataset, read_covariate_rows, read_covariates, read_offsets, write_dataset,
)
from utils.errors import DataError, OptimizationError, ZtpsError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2


def configure_logging(level: str = LOG_LEVEL, log_file: str = LOG_FILE) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="output", help="Output directory")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--threads", type=int, default=DEFAULT_THREADS)
    common.add_argument("--log-level", default=LOG_LEVEL)
    common.add_argument("--log-file", default=LOG_FILE, help="Log file; empty to disable")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--counts", help="Site by species counts (first column site_id)")
    data.add_argument("--covariates", help="Raw covariates parallel by site_id")
    data.add_argument("--offsets", help="Sampling efforts by site_id; 1 when absent")
    data.add_argument("--tree", help="Binary Newick tree over the species")

    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument("--family", choices=["auto", "binomial", "betabinomial"], default="auto")
    fitting.add_argument("--zi", choices=["auto", "off"], default="auto")
    fitting.add_argument("--global", dest="global_family", choices=["poisson", "negbin", "auto"],
                         default="negbin")
    fitting.add_argument("--global-zi", action="store_true", help="Zero-inflate the total abundance")
    fitting.add_argument("--regress-zi", action="store_true",
                         help="Regress zero-inflation probabilities on the covariates")
    fitting.add_argument("--tol", type=float, default=DEFAULT_TOL)
    fitting.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER)

    parser = argparse.ArgumentParser(
        prog="ztps", description="Zero-inflated tree Pólya-splitting regression")
    commands = parser.add_subparsers(dest="command", required=True)

    cmd = commands.add_parser("fit", parents=[common, data, fitting], help="Fit a model")
    cmd.add_argument("--rows", help="Extra covariate rows for the effects table")

    cmd = commands.add_parser("simulate", parents=[common, fitting], help="Simulate a dataset")
    cmd.add_argument("--model", help="Model file to simulate from")
    cmd.add_argument("--tree", help="Tree for a generated model; balanced over sp1..spJ when absent")
    cmd.add_argument("--n-species", type=int, default=8)
    cmd.add_argument("--n-sites", type=int, default=400)
    cmd.add_argument("--n-covariates", type=int, default=2)
    cmd.add_argument("--mean-total", type=float, default=50.0)
    cmd.add_argument("--coef-scale", type=float, default=0.5)
    cmd.add_argument("--zi-nodes", type=int, default=0)
    cmd.add_argument("--n-folds", type=int, default=0, help="Also write random fold labels")

    cmd = commands.add_parser("predict", parents=[common], help="Expected counts per species")
    cmd.add_argument("--model", required=True)
    cmd.add_argument("--covariates", help="Site covariates to predict at")
    cmd.add_argument("--offsets", help="Sampling efforts for those sites")
    cmd.add_argument("--rows", help="Covariate rows to predict at")

    cmd = commands.add_parser("eval", parents=[common, data, fitting], help="Cross-validate")
    cmd.add_argument("--folds", help="Fold labels by site_id")

    cmd = commands.add_parser("export-effects", parents=[common], help="Size effects of a saved model")
    cmd.add_argument("--model", required=True)
    cmd.add_argument("--rows", help="Covariate rows; the training mean row is always included")
    return parser


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    fit_config = FitConfig.from_flags(
        family=getattr(args, "family", "auto"),
        zi=getattr(args, "zi", "auto"),
        global_family=getattr(args, "global_family", "negbin"),
        global_zi=getattr(args, "global_zi", False),
        regress_zi=getattr(args, "regress_zi", False),
        tol=getattr(args, "tol", DEFAULT_TOL),
        max_iter=getattr(args, "max_iter", DEFAULT_MAX_ITER),
        threads=args.threads,
    )
    return RunConfig(
        command=args.command,
        counts=getattr(args, "counts", None),
        covariates=getattr(args, "covariates", None),
        offsets=getattr(args, "offsets", None),
        tree=getattr(args, "tree", None),
        folds=getattr(args, "folds", None),
        model=getattr(args, "model", None),
        rows=getattr(args, "rows", None),
        out=args.out,
        seed=args.seed,
        n_sites=getattr(args, "n_sites", 400),
        n_covariates=getattr(args, "n_covariates", 2),
        mean_total=getattr(args, "mean_total", 50.0),
        coef_scale=getattr(args, "coef_scale", 0.5),
        zi_nodes=getattr(args, "zi_nodes", 0),
        n_folds=getattr(args, "n_folds", 0),
        n_species=getattr(args, "n_species", 8),
        fit=fit_config,
    )


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise DataError(f"{flag} is required for this command")
    return value


def _effects_for_rows(fitted, rows_path: Optional[str]):
    tables = [size_effects(fitted)]
    if rows_path:
        rows = read_covariate_rows(rows_path, fitted.covariate_names)
        tables.append(size_effects(fitted, rows.values, row_labels=list(rows.index)))
    frame = pd.concat([table.frame for table in tables], ignore_index=True)
    return EffectTable(frame)


def cmd_fit(config: RunConfig) -> int:
    dataset = load_dataset(_require(config.counts, "--counts"), config.covariates, config.offsets)
    tree = read_newick(_require(config.tree, "--tree"))
    fitted = fit(dataset, tree, config.fit)
    report = ReportGenerator(config.out, config.fingerprint())
    save_model(fitted, report.path("model.json"))
    report.write_fit_outputs(fitted, _effects_for_rows(fitted, config.rows))
    if fitted.flagged_nodes:
        logger.error(f"Fit completed with flagged nodes: {', '.join(fitted.flagged_nodes)}")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_simulate(config: RunConfig) -> int:
    rng = np.random.default_rng(config.seed)
    if config.model:
        model = load_model(config.model)
    else:
        tree = read_newick(config.tree) if config.tree else balanced_tree(
            [f"sp{j + 1}" for j in range(config.n_species)])
        global_family = "negbin" if config.fit.global_family == "auto" else config.fit.global_family
        model = random_regression_model(tree, config.n_covariates, rng, coef_scale=config.coef_scale,
                                        mean_total=config.mean_total, zi_nodes=config.zi_nodes,
                                        families=config.fit.families, global_family=global_family)
    dataset = simulate_dataset(model, config.n_sites, int(rng.integers(2 ** 31)),
                               n_folds=config.n_folds or None)
    fingerprint = config.fingerprint()
    write_dataset(dataset, config.out, fingerprint)
    with open(os.path.join(config.out, "tree.nwk"), "w", encoding="utf-8") as f:
        f.write(model.tree.to_newick(internal_labels=False, lengths=False) + "\n")
    save_model(model, os.path.join(config.out, "model_true.json"))
    return EXIT_OK


def cmd_predict(config: RunConfig) -> int:
    fitted = load_model(_require(config.model, "--model"))
    if config.covariates:
        rows = read_covariates(config.covariates)
        offsets = read_offsets(config.offsets, rows.index).values
    elif config.rows:
        rows = read_covariate_rows(config.rows, fitted.covariate_names)
        offsets = None
    else:
        rows = pd.DataFrame([fitted.covariate_means], columns=fitted.covariate_names,
                            index=pd.Index(["mean"], name="row"))
        offsets = None
    predictions = predict_frame(fitted, rows, offsets)
    ReportGenerator(config.out, config.fingerprint()).write_predictions(predictions)
    return EXIT_OK


def cmd_eval(config: RunConfig) -> int:
    dataset = load_dataset(_require(config.counts, "--counts"), config.covariates, config.offsets,
                           _require(config.folds, "--folds"))
    tree = read_newick(_require(config.tree, "--tree"))
    report = cross_validate(dataset, tree, FoldAssignment(dataset.folds), config.fit)
    ReportGenerator(config.out, config.fingerprint()).write_cv_report(report)
    if report.flagged:
        logger.error(f"Cross-validation completed with flagged nodes in folds {sorted(report.flagged)}")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_export_effects(config: RunConfig) -> int:
    fitted = load_model(_require(config.model, "--model"))
    ReportGenerator(config.out, config.fingerprint()).write_effects(_effects_for_rows(fitted, config.rows))
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "export-effects": cmd_export_effects,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.log_file)
    try:
        config = run_config_from_args(args)
    except ValueError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_INPUT
    logger.info(f"Starting {config.command} (config {config.fingerprint()})")
    try:
        code = COMMANDS[config.command](config)
    except OptimizationError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except ZtpsError as e:
        logger.error(str(e))
        return EXIT_INPUT
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_INPUT
    logger.info(f"Finished {config.command} with exit code {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
