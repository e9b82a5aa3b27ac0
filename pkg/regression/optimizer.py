import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from config.settings import DEFAULT_MAX_ITER, DEFAULT_REL_TOL, DEFAULT_TOL
from utils.errors import OptimizationError

logger = logging.getLogger(__name__)

LoglikFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]

# Line search steps per iteration, and fresh L-BFGS-B starts after a stalled search
MAX_LINE_SEARCH = 60
MAX_RESTARTS = 3
# A non-finite point scores this many multiples of (1 + |best loglik|) worse than the best point
NON_FINITE_PENALTY = 1e3


@dataclass
class OptimizeReport:
    """Outcome of one likelihood maximization"""
    coef: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    grad_norm: float
    message: str = ""
    n_evals: int = 0


def _evaluate(fun: LoglikFn, x: np.ndarray):
    try:
        value, grad = fun(x)
    except FloatingPointError:
        return -np.inf, None
    grad = np.asarray(grad, dtype=float)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        return -np.inf, None
    return float(value), grad


class _NegatedLoglik:
    """Negative loglik for scipy, remembering the best finite point

    A non-finite loglik becomes a value above the best one seen, so the line
    search shortens its step instead of stopping.
    """

    def __init__(self, fun: LoglikFn, x: np.ndarray, value: float, grad: np.ndarray):
        self.fun = fun
        self.best = (x.copy(), value, grad)
        self.n_evals = 1
        self.round_start = x.copy()
        self.round_finite = 0
        self.round_non_finite = 0

    def new_round(self) -> np.ndarray:
        self.round_start = self.best[0]
        self.round_finite = 0
        self.round_non_finite = 0
        return self.round_start

    @property
    def only_non_finite(self) -> bool:
        """Every trial point of this round, past the start, had a non-finite loglik"""
        return self.round_non_finite > 0 and self.round_finite == 0

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        self.n_evals += 1
        value, grad = _evaluate(self.fun, x)
        _, best_value, best_grad = self.best
        if grad is None:
            self.round_non_finite += 1
            return -best_value + NON_FINITE_PENALTY * (1.0 + abs(best_value)), -best_grad
        if not np.array_equal(x, self.round_start):
            self.round_finite += 1
        if value > best_value:
            self.best = (np.array(x, dtype=float), value, grad)
        return -value, -grad


def maximize(fun: LoglikFn, init: np.ndarray, controls: Optional[Dict[str, Any]] = None) -> OptimizeReport:
    """Maximize a log-likelihood with scipy's L-BFGS-B

    Args:
        fun: Maps a coefficient vector to (loglik, gradient)
        init: Starting coefficients; the loglik there must be finite
        controls: tol (gradient infinity norm), rel_tol (relative loglik
            change) and max_iter

    Returns:
        OptimizeReport whose loglik is never below the starting value
    """
    controls = controls or {}
    tol = controls.get("tol", DEFAULT_TOL)
    rel_tol = controls.get("rel_tol", DEFAULT_REL_TOL)
    max_iter = controls.get("max_iter", DEFAULT_MAX_ITER)

    x = np.array(init, dtype=float)
    value, grad = _evaluate(fun, x)
    if grad is None:
        raise OptimizationError("log-likelihood is not finite at the starting point",
                                diagnostics={"init": x.tolist()})
    objective = _NegatedLoglik(fun, x, value, grad)
    if len(x) == 0:
        return OptimizeReport(coef=x, loglik=value, converged=True, n_iter=0, grad_norm=0.0,
                              message="no coefficients", n_evals=1)

    n_iter = 0
    converged = False
    message = "maximum iterations reached"
    for _ in range(MAX_RESTARTS + 1):
        start = objective.new_round()
        result = minimize(objective, start, method="L-BFGS-B", jac=True,
                          options={"maxiter": max_iter - n_iter, "gtol": tol, "ftol": rel_tol,
                                   "maxls": MAX_LINE_SEARCH})
        n_iter += int(result.nit)
        message = str(result.message)
        if result.success:
            converged = True
            break
        if objective.only_non_finite:
            raise OptimizationError(
                "log-likelihood stayed non-finite along the search direction",
                diagnostics={"coef": start.tolist(), "loglik": objective.best[1], "message": message})
        if n_iter >= max_iter:
            break
        # stalled line search; restart from the best point with fresh curvature memory
        logger.debug(f"optimizer: restarting after '{message}'")

    x, value, grad = objective.best
    grad_norm = float(np.max(np.abs(grad)))
    if not converged and grad_norm < tol:
        converged, message = True, "gradient norm below tolerance"
    logger.debug(f"optimizer: {message} after {n_iter} iterations, "
                 f"loglik={value:.6f}, |grad|={grad_norm:.2e}")
    return OptimizeReport(coef=x, loglik=value, converged=converged, n_iter=n_iter,
                          grad_norm=grad_norm, message=message, n_evals=objective.n_evals)


def observed_information(fun: LoglikFn, coef: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Negative Hessian of the loglik by central differences of the gradient"""
    coef = np.asarray(coef, dtype=float)
    size = len(coef)
    hessian = np.zeros((size, size))
    for k in range(size):
        h = rel_step * max(1.0, abs(coef[k]))
        up = coef.copy()
        down = coef.copy()
        up[k] += h
        down[k] -= h
        hessian[:, k] = (fun(up)[1] - fun(down)[1]) / (2.0 * h)
    hessian = 0.5 * (hessian + hessian.T)
    return -hessian


def standard_errors(fun: LoglikFn, coef: np.ndarray) -> np.ndarray:
    """Square roots of the diagonal of the inverse observed information

    NaN entries are returned when the information is not positive definite,
    which happens for coefficients pushed to the edge of the parameter space.
    """
    coef = np.asarray(coef, dtype=float)
    if len(coef) == 0:
        return np.zeros(0)
    try:
        information = observed_information(fun, coef)
        if not np.all(np.isfinite(information)):
            raise np.linalg.LinAlgError("non-finite information")
        np.linalg.cholesky(information)
        covariance = np.linalg.inv(information)
    except np.linalg.LinAlgError:
        logger.warning("observed information is not positive definite; standard errors unavailable")
        return np.full(len(coef), np.nan)
    return np.sqrt(np.clip(np.diag(covariance), 0.0, None))
