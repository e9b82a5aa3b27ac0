import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import logit

from config.settings import FitConfig
from regression.likelihoods import (
    GlobalData, GlobalRegSpec, NodeData, NodeRegSpec, aic, bic, global_loglik, node_loglik,
)
from regression.optimizer import maximize, standard_errors
from utils.errors import OptimizationError

logger = logging.getLogger(__name__)

# Candidates whose AIC differ by less than this are treated as tied
AIC_TIE_TOL = 1e-8
MIN_PI = 0.01
MAX_PI = 0.99


@dataclass
class CandidateFit:
    """One entry of the per-node selection grid"""
    family: str
    zi_side: str
    loglik: float
    aic: float
    n_params: int
    converged: bool
    error: Optional[str] = None

    @property
    def label(self) -> str:
        return self.family if self.zi_side == "none" else f"{self.family}/{self.zi_side}"


@dataclass
class NodeFit:
    """Selected split regression at one node with its diagnostics"""
    spec: NodeRegSpec
    loglik: float
    n_obs: int
    se: np.ndarray
    converged: bool = True
    flagged: bool = False
    message: str = ""
    candidates: List[CandidateFit] = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    @property
    def aic(self) -> float:
        return aic(self.loglik, self.n_params)

    @property
    def bic(self) -> float:
        return bic(self.loglik, self.n_params, self.n_obs)

    def candidate(self, family: str, zi_side: str) -> Optional[CandidateFit]:
        for fit in self.candidates:
            if fit.family == family and fit.zi_side == zi_side:
                return fit
        return None


@dataclass
class GlobalFit:
    """Fitted global abundance GLM"""
    spec: GlobalRegSpec
    loglik: float
    n_obs: int
    se: np.ndarray
    converged: bool = True
    candidates: List[CandidateFit] = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    @property
    def aic(self) -> float:
        return aic(self.loglik, self.n_params)

    @property
    def bic(self) -> float:
        return bic(self.loglik, self.n_params, self.n_obs)


def _pooled_logit(n1: np.ndarray, n: np.ndarray) -> float:
    return float(logit((np.sum(n1) + 0.5) / (np.sum(n) + 1.0)))


def _overdispersion_log_sigma(data: NodeData, p: float) -> float:
    """Method-of-moments log(sigma) from the intra-class correlation sigma / (1 + sigma)"""
    n1, n = data.n1, data.n
    usable = n >= 2
    if not np.any(usable):
        return math.log(0.1)
    excess = np.sum((n1[usable] - n[usable] * p) ** 2 - n[usable] * p * (1 - p))
    scale = np.sum(n[usable] * (n[usable] - 1) * p * (1 - p))
    rho = float(np.clip(excess / scale if scale > 0 else 0.0, 1e-3, 0.999))
    return math.log(rho / (1.0 - rho))


def _boundary_pi_logit(data: NodeData, zi_side: str, p: float) -> float:
    if zi_side == "side1":
        observed = np.mean(data.n1 == 0)
        expected = np.mean((1.0 - p) ** data.n)
    else:
        observed = np.mean(data.n1 == data.n)
        expected = np.mean(p ** data.n)
    return float(logit(np.clip(observed - expected, MIN_PI, MAX_PI)))


def initial_node_spec(data: NodeData, family: str, zi_side: str, n_pi: int,
                      warm: Optional[NodeRegSpec] = None) -> NodeRegSpec:
    """Starting coefficients for one candidate

    Args:
        data: Node observations
        family: Split family of the candidate
        zi_side: Zero-inflation side of the candidate
        n_pi: Length of the zero-inflation block
        warm: A fitted non-inflated spec of the same family to start from
    """
    n_cols = data.X.shape[1]
    spec = NodeRegSpec.zeros(family, zi_side, n_cols, n_cols, n_pi)
    if warm is not None:
        spec.beta[:] = warm.beta
        if warm.delta is not None and spec.delta is not None:
            spec.delta[:] = warm.delta
    else:
        spec.beta[0] = _pooled_logit(data.n1, data.n)
        if spec.delta is not None:
            spec.delta[0] = _overdispersion_log_sigma(data, float(np.mean(data.n1) / np.mean(data.n)))
    if spec.b is not None:
        p = float(np.clip(np.sum(data.n1) / np.sum(data.n), 1e-6, 1 - 1e-6))
        spec.b[0] = _boundary_pi_logit(data, zi_side, p)
    return spec


def fallback_node_fit(data: NodeData, message: str) -> NodeFit:
    """Intercept-only binomial used when every candidate fails"""
    spec = NodeRegSpec("binomial", [_pooled_logit(data.n1, data.n)])
    loglik = node_loglik(spec, data)[0] if data.n_obs else 0.0
    return NodeFit(spec=spec, loglik=loglik, n_obs=data.n_obs, se=np.full(1, np.nan),
                   converged=False, flagged=True, message=message)


class NodeModelSelector:
    """Fits the family by zero-inflation grid at a node and keeps the AIC best"""

    def __init__(self, config: Optional[FitConfig] = None):
        self.config = config or FitConfig()
        self.controls = self.config.optimizer_controls()
        self.logger = logging.getLogger(self.__class__.__name__)

    def _pi_length(self, data: NodeData) -> int:
        return data.X.shape[1] if self.config.regress_zi else 1

    def _fit_candidate(self, data: NodeData, init: NodeRegSpec):
        def objective(coef):
            return node_loglik(init.unpack(coef), data)

        report = maximize(objective, init.pack(), self.controls)
        return init.unpack(report.coef), report

    def _order(self) -> List[Tuple[str, str]]:
        # non-inflated candidates first so inflated ones can warm start
        sides = sorted(self.config.zi_sides, key=lambda side: side != "none")
        return [(family, side) for family in self.config.families for side in sides]

    def select(self, data: NodeData, name: str = "") -> NodeFit:
        """Fit every candidate and return the selected one

        Args:
            data: Observations with positive parent totals
            name: Node name used in log messages

        Returns:
            NodeFit; flagged with the fallback spec when no candidate fits
        """
        if data.n_obs == 0:
            self.logger.warning(f"node {name}: no site with a positive total, using fallback")
            return fallback_node_fit(data, "no site with a positive group total")

        fitted: Dict[Tuple[str, str], Tuple[NodeRegSpec, object]] = {}
        candidates = []
        for family, side in self._order():
            warm = fitted.get((family, "none"), (None, None))[0]
            try:
                init = initial_node_spec(data, family, side, self._pi_length(data), warm)
                spec, report = self._fit_candidate(data, init)
                fitted[(family, side)] = (spec, report)
                candidates.append(CandidateFit(family, side, report.loglik,
                                               aic(report.loglik, spec.n_params),
                                               spec.n_params, report.converged))
            except Exception as e:
                self.logger.debug(f"node {name}: candidate {family}/{side} failed: {e}")
                candidates.append(CandidateFit(family, side, -np.inf, np.inf, 0, False, str(e)))

        for candidate in candidates:
            self.logger.debug(f"node {name}: {candidate.label} loglik={candidate.loglik:.4f} "
                              f"AIC={candidate.aic:.4f}")

        usable = [c for c in candidates if c.error is None and np.isfinite(c.aic)]
        if not usable:
            self.logger.warning(f"node {name}: all candidate fits failed, using fallback")
            fit = fallback_node_fit(data, "all candidate fits failed")
            fit.candidates = candidates
            return fit

        best_aic = min(c.aic for c in usable)
        tied = [c for c in usable if c.aic - best_aic <= AIC_TIE_TOL]
        best = min(tied, key=lambda c: (c.n_params, c.zi_side != "none"))
        spec, report = fitted[(best.family, best.zi_side)]
        se = standard_errors(lambda coef: node_loglik(spec.unpack(coef), data), spec.pack())
        if not report.converged:
            self.logger.warning(f"node {name}: {best.label} did not converge ({report.message})")
        return NodeFit(spec=spec, loglik=report.loglik, n_obs=data.n_obs, se=se,
                       converged=report.converged, message=report.message, candidates=candidates)


def select_node_model(data: NodeData, config: Optional[FitConfig] = None, name: str = "") -> NodeFit:
    return NodeModelSelector(config).select(data, name)


def initial_global_spec(data: GlobalData, family: str, n_pi: Optional[int]) -> GlobalRegSpec:
    y = data.y
    beta = np.zeros(data.X.shape[1])
    beta[0] = math.log(max(np.sum(y), 0.5) / np.sum(np.exp(data.log_offset)))
    log_dispersion = None
    if family == "negbin":
        mean = max(float(np.mean(y)), 1e-3)
        dispersion = (float(np.var(y)) - mean) / mean ** 2
        log_dispersion = math.log(float(np.clip(dispersion, 1e-4, 1e4)))
    zi_b = None
    if n_pi is not None:
        zi_b = np.zeros(n_pi)
        zi_b[0] = float(logit(np.clip(np.mean(y == 0), MIN_PI, MAX_PI)))
    return GlobalRegSpec(family, beta, log_dispersion, zi_b)


def fit_global(data: GlobalData, config: Optional[FitConfig] = None) -> GlobalFit:
    """Fit the global GLM; 'auto' picks poisson or negbin by AIC

    Raises:
        OptimizationError: when no family can be fitted
    """
    config = config or FitConfig()
    families = ["poisson", "negbin"] if config.global_family == "auto" else [config.global_family]
    n_pi = None
    if config.global_zi:
        n_pi = data.X.shape[1] if config.regress_zi else 1

    best = None
    candidates = []
    errors = []
    for family in families:
        init = initial_global_spec(data, family, n_pi)
        try:
            report = maximize(lambda coef: global_loglik(init.unpack(coef), data),
                              init.pack(), config.optimizer_controls())
        except OptimizationError as e:
            errors.append(f"{family}: {e}")
            continue
        spec = init.unpack(report.coef)
        candidates.append(CandidateFit(family, "none" if n_pi is None else "zero",
                                       report.loglik, aic(report.loglik, spec.n_params),
                                       spec.n_params, report.converged))
        if best is None or candidates[-1].aic < best[2].aic:
            best = (spec, report, candidates[-1])

    if best is None:
        raise OptimizationError("global abundance fit failed", diagnostics={"errors": errors})
    spec, report, _ = best
    se = standard_errors(lambda coef: global_loglik(spec.unpack(coef), data), spec.pack())
    if not report.converged:
        logger.warning(f"global fit did not converge ({report.message})")
    return GlobalFit(spec=spec, loglik=report.loglik, n_obs=data.n_obs, se=se,
                     converged=report.converged, candidates=candidates)
