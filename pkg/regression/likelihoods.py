"""Per-node split and global abundance regression likelihoods.

The log-likelihood of the full model separates into one global GLM term and
one term per internal node, so each piece here is maximized on its own.
Every likelihood returns its value together with the analytic gradient in
``pack()`` order of the coefficient spec.
"""
import math
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import betaln, digamma, expit, gammaln, log_expit

from config.settings import GLOBAL_FAMILIES, SPLIT_FAMILIES, ZI_SIDES
from distributions.polya import THETA_MAX, log_binom_coef
from utils.errors import DataError, DomainError

logger = logging.getLogger(__name__)


# Linear predictors are clipped here before exponentiation
ETA_LIMIT = 700.0
# log sigma bounds; sigma >= 1 / THETA_MAX keeps p / sigma and (1 - p) / sigma within THETA_MAX
LOG_SIGMA_MIN = -math.log(THETA_MAX)
LOG_SIGMA_MAX = 40.0


def bounded_log_sigma(eta_sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """log sigma held inside its bounds, and the mask of rows left unchanged"""
    inside = (eta_sigma > LOG_SIGMA_MIN) & (eta_sigma < LOG_SIGMA_MAX)
    return np.clip(eta_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX), inside


@dataclass(frozen=True)
class LinkSpec:
    """Link between one distribution parameter and its linear predictor"""
    parameter: str
    link: str

    def inverse(self, eta: np.ndarray) -> np.ndarray:
        if self.link == "logit":
            return expit(eta)
        return np.exp(np.clip(eta, -ETA_LIMIT, ETA_LIMIT))

    def derivative(self, eta: np.ndarray) -> np.ndarray:
        """d parameter / d eta"""
        if self.link == "logit":
            value = expit(eta)
            return value * expit(-eta)
        return self.inverse(eta)


P1_LINK = LinkSpec("p1", "logit")
SIGMA_LINK = LinkSpec("sigma", "log")
PI_LINK = LinkSpec("pi", "logit")
MEAN_LINK = LinkSpec("mu", "log")


def _as_block(values) -> Optional[np.ndarray]:
    if values is None:
        return None
    return np.atleast_1d(np.asarray(values, dtype=float)).copy()


@dataclass
class NodeRegSpec:
    """Split regression at one internal node

    Each coefficient block multiplies the leading columns of the design matrix
    (intercept first), so a block of length 1 is intercept-only.

    Args:
        family: "binomial" or "betabinomial"
        beta: Coefficients of logit(p_B1)
        zi_side: "none", "side1" (first child may be emptied) or "side2"
        delta: Coefficients of log(sigma_B); beta-binomial only
        b: Coefficients of logit(pi) for the zero-inflated side
    """
    family: str
    beta: np.ndarray
    zi_side: str = "none"
    delta: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in SPLIT_FAMILIES:
            raise DomainError(f"unknown split family '{self.family}'")
        if self.zi_side not in ZI_SIDES:
            raise DomainError(f"unknown zero-inflation side '{self.zi_side}'")
        self.beta = _as_block(self.beta)
        self.delta = _as_block(self.delta)
        self.b = _as_block(self.b)
        if self.family == "binomial" and self.delta is not None:
            raise DomainError("sigma is not identifiable for binomial splits")
        if self.family == "betabinomial" and self.delta is None:
            raise DomainError("beta-binomial splits need delta coefficients")
        if (self.zi_side == "none") != (self.b is None):
            raise DomainError("b coefficients go with a zero-inflated side and only then")

    @classmethod
    def zeros(cls, family: str, zi_side: str, n_beta: int, n_delta: int, n_b: int) -> "NodeRegSpec":
        return cls(family=family, beta=np.zeros(n_beta), zi_side=zi_side,
                   delta=np.zeros(n_delta) if family == "betabinomial" else None,
                   b=np.zeros(n_b) if zi_side != "none" else None)

    def blocks(self) -> List[Tuple[str, np.ndarray]]:
        blocks = [("beta", self.beta)]
        if self.delta is not None:
            blocks.append(("delta", self.delta))
        if self.b is not None:
            blocks.append(("b", self.b))
        return blocks

    @property
    def n_params(self) -> int:
        return sum(len(block) for _, block in self.blocks())

    def pack(self) -> np.ndarray:
        return np.concatenate([block for _, block in self.blocks()])

    def unpack(self, vector: Sequence[float]) -> "NodeRegSpec":
        vector = np.asarray(vector, dtype=float)
        if len(vector) != self.n_params:
            raise DomainError(f"expected {self.n_params} coefficients, got {len(vector)}")
        values = {}
        start = 0
        for name, block in self.blocks():
            values[name] = vector[start:start + len(block)]
            start += len(block)
        return replace(self, **values)

    def swapped(self) -> "NodeRegSpec":
        """Same model with the children's roles exchanged"""
        side = {"none": "none", "side1": "side2", "side2": "side1"}[self.zi_side]
        return NodeRegSpec(self.family, -self.beta, side, self.delta, self.b)

    def split_parameters(self, X: np.ndarray) -> dict:
        """p1, sigma and theta (None for binomial), pi1 and pi2 at each row of X"""
        X = np.atleast_2d(X)
        eta = X[:, :len(self.beta)] @ self.beta
        params = {"eta": eta, "p1": P1_LINK.inverse(eta), "sigma": None, "theta1": None, "theta2": None,
                  "pi1": np.zeros(len(X)), "pi2": np.zeros(len(X))}
        if self.delta is not None:
            log_sigma, _ = bounded_log_sigma(X[:, :len(self.delta)] @ self.delta)
            inv_sigma = np.exp(-log_sigma)
            tiny = np.finfo(float).tiny
            params["sigma"] = SIGMA_LINK.inverse(log_sigma)
            params["theta1"] = np.maximum(expit(eta) * inv_sigma, tiny)
            params["theta2"] = np.maximum(expit(-eta) * inv_sigma, tiny)
        if self.b is not None:
            pi = PI_LINK.inverse(X[:, :len(self.b)] @ self.b)
            params["pi1" if self.zi_side == "side1" else "pi2"] = pi
        return params

    def label(self) -> str:
        return self.family if self.zi_side == "none" else f"zi-{self.family}-{self.zi_side}"


@dataclass
class GlobalRegSpec:
    """GLM for the total abundance with log mean and additive log offset

    Args:
        family: "poisson" or "negbin"
        beta_omega: Coefficients of log mean
        log_dispersion: log(1/size) for negbin
        zi_b: Coefficients of logit(pi) for a zero-inflated total, or None
    """
    family: str
    beta_omega: np.ndarray
    log_dispersion: Optional[float] = None
    zi_b: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in GLOBAL_FAMILIES:
            raise DomainError(f"unknown global family '{self.family}'")
        self.beta_omega = _as_block(self.beta_omega)
        self.zi_b = _as_block(self.zi_b)
        if (self.family == "negbin") != (self.log_dispersion is not None):
            raise DomainError("log_dispersion goes with the negbin family and only then")
        if self.log_dispersion is not None:
            self.log_dispersion = float(self.log_dispersion)

    @property
    def n_params(self) -> int:
        count = len(self.beta_omega) + (1 if self.family == "negbin" else 0)
        return count + (len(self.zi_b) if self.zi_b is not None else 0)

    @property
    def size(self) -> Optional[float]:
        return None if self.log_dispersion is None else math.exp(-self.log_dispersion)

    def pack(self) -> np.ndarray:
        parts = [self.beta_omega]
        if self.log_dispersion is not None:
            parts.append(np.array([self.log_dispersion]))
        if self.zi_b is not None:
            parts.append(self.zi_b)
        return np.concatenate(parts)

    def unpack(self, vector: Sequence[float]) -> "GlobalRegSpec":
        vector = np.asarray(vector, dtype=float)
        if len(vector) != self.n_params:
            raise DomainError(f"expected {self.n_params} coefficients, got {len(vector)}")
        n_beta = len(self.beta_omega)
        start = n_beta
        log_dispersion = None
        if self.log_dispersion is not None:
            log_dispersion = float(vector[start])
            start += 1
        zi_b = vector[start:] if self.zi_b is not None else None
        return GlobalRegSpec(self.family, vector[:n_beta], log_dispersion, zi_b)

    def mean(self, X: np.ndarray, log_offset: np.ndarray) -> np.ndarray:
        """Mean of the non-inflated law at each row"""
        X = np.atleast_2d(X)
        return MEAN_LINK.inverse(X[:, :len(self.beta_omega)] @ self.beta_omega + log_offset)

    def zero_pi(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.zi_b is None:
            return np.zeros(len(X))
        return PI_LINK.inverse(X[:, :len(self.zi_b)] @ self.zi_b)

    def label(self) -> str:
        return self.family if self.zi_b is None else f"zi-{self.family}"


@dataclass
class NodeData:
    """Split observations at one node: sites with a positive parent total only"""
    n1: np.ndarray
    n: np.ndarray
    X: np.ndarray
    sites: np.ndarray = field(default=None)
    log_coef: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.log_coef = log_binom_coef(self.n, self.n1)

    @classmethod
    def build(cls, n1, n, X, site_ids: Optional[Sequence] = None) -> "NodeData":
        n1 = np.asarray(n1, dtype=float)
        n = np.asarray(n, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if site_ids is None:
            site_ids = np.arange(len(n))
        site_ids = np.asarray(site_ids)
        bad = np.flatnonzero((n1 > n) | (n1 < 0))
        if len(bad):
            raise DataError(f"split count exceeds its total at site {site_ids[bad[0]]}")
        keep = n > 0
        return cls(n1[keep], n[keep], X[keep], site_ids[keep])

    @property
    def n_obs(self) -> int:
        return len(self.n)

    def swapped(self) -> "NodeData":
        return NodeData(self.n - self.n1, self.n, self.X, self.sites)


@dataclass
class GlobalData:
    """Total abundances with design rows and log offsets"""
    y: np.ndarray
    X: np.ndarray
    log_offset: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.log_offset = np.broadcast_to(
            np.asarray(self.log_offset, dtype=float), self.y.shape).copy()

    @property
    def n_obs(self) -> int:
        return len(self.y)


def _zero_inflate(logf: np.ndarray, boundary: np.ndarray, zeta: np.ndarray):
    """Mix a point mass at the boundary into a log density

    Returns:
        (log-likelihood per site, weight on the gradient of logf, d/dzeta)
    """
    log_pi = log_expit(zeta)
    log_keep = log_expit(-zeta)
    log_mix = np.logaddexp(log_pi, log_keep + logf)
    ll = np.where(boundary, log_mix, log_keep + logf)
    weight = np.where(boundary, np.exp(log_keep + logf - log_mix), 1.0)
    # pi (1 - pi) (1 - f) / mix at boundary sites, -pi elsewhere
    d_boundary = np.exp(log_pi + log_keep - log_mix) * -np.expm1(np.minimum(logf, 0.0))
    d_zeta = np.where(boundary, d_boundary, -np.exp(log_pi))
    return ll, weight, d_zeta


def node_loglik(spec: NodeRegSpec, data: NodeData) -> Tuple[float, np.ndarray]:
    """Split log-likelihood at one node and its gradient

    Args:
        spec: Family, zero-inflation side and coefficients
        data: Sites with positive parent totals

    Returns:
        (loglik, gradient in spec.pack() order)
    """
    X, n1, n = data.X, data.n1, data.n
    n2 = n - n1
    beta_X = X[:, :len(spec.beta)]
    eta = beta_X @ spec.beta
    p = expit(eta)
    q = expit(-eta)

    if spec.family == "binomial":
        logf = data.log_coef + n1 * log_expit(eta) + n2 * log_expit(-eta)
        pieces = [(beta_X, n1 - n * p)]
    else:
        delta_X = X[:, :len(spec.delta)]
        log_sigma, inside = bounded_log_sigma(delta_X @ spec.delta)
        inv_sigma = np.exp(-log_sigma)
        theta1 = p * inv_sigma
        theta2 = q * inv_sigma
        total = theta1 + theta2
        logf = data.log_coef + betaln(n1 + theta1, n2 + theta2) - betaln(theta1, theta2)
        d1 = digamma(n1 + theta1) - digamma(theta1)
        d2 = digamma(n2 + theta2) - digamma(theta2)
        ds = digamma(n + total) - digamma(total)
        d_eta = p * q * inv_sigma * (d1 - d2)
        # flat in delta where log sigma sits on a bound
        d_log_sigma = np.where(inside, -theta1 * d1 - theta2 * d2 + total * ds, 0.0)
        pieces = [(beta_X, d_eta), (delta_X, d_log_sigma)]

    if spec.zi_side == "none":
        grad = np.concatenate([Xb.T @ d for Xb, d in pieces])
        return float(np.sum(logf)), grad

    b_X = X[:, :len(spec.b)]
    boundary = (n1 == 0) if spec.zi_side == "side1" else (n2 == 0)
    ll, weight, d_zeta = _zero_inflate(logf, boundary, b_X @ spec.b)
    grad = np.concatenate([Xb.T @ (weight * d) for Xb, d in pieces] + [b_X.T @ d_zeta])
    return float(np.sum(ll)), grad


def global_loglik(spec: GlobalRegSpec, data: GlobalData) -> Tuple[float, np.ndarray]:
    """Global abundance log-likelihood under mu = exp(x'beta + log offset)

    Returns:
        (loglik, gradient in spec.pack() order)
    """
    y, X = data.y, data.X
    beta_X = X[:, :len(spec.beta_omega)]
    eta = np.clip(beta_X @ spec.beta_omega + data.log_offset, -ETA_LIMIT, ETA_LIMIT)
    mu = np.exp(eta)

    if spec.family == "poisson":
        logf = y * eta - mu - gammaln(y + 1.0)
        pieces = [(beta_X, y - mu)]
        d_alpha = None
    else:
        log_r = -spec.log_dispersion
        r = math.exp(log_r)
        log_total = np.logaddexp(log_r, eta)
        logf = (gammaln(y + r) - gammaln(r) - gammaln(y + 1.0)
                + r * (log_r - log_total) + y * (eta - log_total))
        ratio = np.exp(log_r - log_total)
        pieces = [(beta_X, ratio * (y - mu))]
        d_r = (digamma(y + r) - digamma(r) + (log_r - log_total)
               + 1.0 - (r + y) * np.exp(-log_total))
        d_alpha = -r * d_r

    if spec.zi_b is None:
        weight = 1.0
        ll = logf
        d_zeta = None
    else:
        b_X = X[:, :len(spec.zi_b)]
        ll, weight, d_zeta = _zero_inflate(logf, y == 0, b_X @ spec.zi_b)

    parts = [Xb.T @ (weight * d) for Xb, d in pieces]
    if d_alpha is not None:
        parts.append(np.array([np.sum(weight * d_alpha)]))
    if d_zeta is not None:
        parts.append(b_X.T @ d_zeta)
    return float(np.sum(ll)), np.concatenate(parts)


def aic(loglik: float, k: int) -> float:
    return -2.0 * loglik + 2.0 * k


def bic(loglik: float, k: int, n_obs: int) -> float:
    return -2.0 * loglik + k * math.log(max(n_obs, 1))
