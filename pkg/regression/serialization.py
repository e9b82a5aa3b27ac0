"""Versioned JSON model files.

Layout (FORMAT_VERSION 1):

    format            "ztps-regression"
    version           integer, must equal FORMAT_VERSION
    tree              Newick text with internal node names
    covariates        raw covariate names, intercept excluded
    covariate_means   training mean row
    global            family, beta_omega, log_dispersion, zi_b, loglik,
                      n_obs, se, converged, candidates
    nodes             list in node order: node, name, family, zi_side, beta,
                      delta, b, loglik, n_obs, se, converged, flagged,
                      message, candidates

Floats are written with Python's shortest round-trip repr, so coefficients
survive export and import bit for bit. Non-finite values use the JSON
extensions NaN and Infinity.
"""
import json
import logging
from typing import Any, Dict, List, Optional

import numpy as np

from regression.fit_engine import FittedZtpsRegression
from regression.likelihoods import GlobalRegSpec, NodeRegSpec
from regression.selection import CandidateFit, GlobalFit, NodeFit
from trees.partition_tree import parse_newick
from utils.errors import ModelFormatError, ZtpsError

logger = logging.getLogger(__name__)

FORMAT_NAME = "ztps-regression"
FORMAT_VERSION = 1


def _floats(values: Optional[np.ndarray]) -> Optional[List[float]]:
    return None if values is None else [float(v) for v in values]


def _candidates(candidates: List[CandidateFit]) -> List[Dict[str, Any]]:
    return [{"family": c.family, "zi_side": c.zi_side, "loglik": float(c.loglik), "aic": float(c.aic),
             "n_params": c.n_params, "converged": c.converged, "error": c.error} for c in candidates]


def export_model(fitted: FittedZtpsRegression) -> str:
    tree = fitted.tree
    spec = fitted.global_fit.spec
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tree": tree.to_newick(internal_labels=True, lengths=True),
        "covariates": fitted.covariate_names,
        "covariate_means": _floats(fitted.covariate_means),
        "global": {
            "family": spec.family,
            "beta_omega": _floats(spec.beta_omega),
            "log_dispersion": spec.log_dispersion,
            "zi_b": _floats(spec.zi_b),
            "loglik": float(fitted.global_fit.loglik),
            "n_obs": fitted.global_fit.n_obs,
            "se": _floats(fitted.global_fit.se),
            "converged": fitted.global_fit.converged,
            "candidates": _candidates(fitted.global_fit.candidates),
        },
        "nodes": [],
    }
    for node, fit in fitted.node_fits.items():
        payload["nodes"].append({
            "node": node,
            "name": tree.node_name(node),
            "family": fit.spec.family,
            "zi_side": fit.spec.zi_side,
            "beta": _floats(fit.spec.beta),
            "delta": _floats(fit.spec.delta),
            "b": _floats(fit.spec.b),
            "loglik": float(fit.loglik),
            "n_obs": fit.n_obs,
            "se": _floats(fit.se),
            "converged": fit.converged,
            "flagged": fit.flagged,
            "message": fit.message,
            "candidates": _candidates(fit.candidates),
        })
    return json.dumps(payload, indent=2)


def _read_candidates(entries: List[Dict[str, Any]]) -> List[CandidateFit]:
    return [CandidateFit(e["family"], e["zi_side"], e["loglik"], e["aic"], e["n_params"],
                         e["converged"], e.get("error")) for e in entries]


def import_model(text: str) -> FittedZtpsRegression:
    """Rebuild a fitted model from export_model output

    Raises:
        ModelFormatError: wrong format, version mismatch or missing fields
    """
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"model file is not valid JSON: {e}")
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_NAME:
        raise ModelFormatError("not a ztps-regression model file")
    if payload.get("version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"model file version {payload.get('version')!r} is not supported (expected {FORMAT_VERSION})")
    try:
        tree = parse_newick(payload["tree"])
        g = payload["global"]
        global_fit = GlobalFit(
            spec=GlobalRegSpec(g["family"], g["beta_omega"], g["log_dispersion"], g["zi_b"]),
            loglik=g["loglik"], n_obs=g["n_obs"], se=np.asarray(g["se"], dtype=float),
            converged=g["converged"], candidates=_read_candidates(g["candidates"]))
        node_fits = {}
        for entry in payload["nodes"]:
            spec = NodeRegSpec(entry["family"], entry["beta"], entry["zi_side"], entry["delta"], entry["b"])
            node_fits[int(entry["node"])] = NodeFit(
                spec=spec, loglik=entry["loglik"], n_obs=entry["n_obs"],
                se=np.asarray(entry["se"], dtype=float), converged=entry["converged"],
                flagged=entry["flagged"], message=entry["message"],
                candidates=_read_candidates(entry["candidates"]))
        return FittedZtpsRegression(tree, payload["covariates"], global_fit, node_fits,
                                    payload["covariate_means"])
    except KeyError as e:
        raise ModelFormatError(f"model file is missing field {e}")
    except ZtpsError as e:
        if isinstance(e, ModelFormatError):
            raise
        raise ModelFormatError(f"model file is inconsistent: {e}")


def save_model(fitted: FittedZtpsRegression, path: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write(export_model(fitted))
    logger.info(f"Model written to {path}")
    return path


def load_model(path: str) -> FittedZtpsRegression:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ModelFormatError(f"cannot read model file {path}: {e}")
    return import_model(text)
