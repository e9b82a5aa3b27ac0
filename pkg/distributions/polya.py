"""Generalized factorials, bivariate Pólya split laws and global abundance laws.

Everything is evaluated in log space through log-Gamma so that counts in the
thousands stay finite. The split kind ``c`` selects the hypergeometric (-1),
binomial (0) or beta-binomial (1) member of the family.
"""
import math
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple, Union

import numpy as np
from scipy.special import gammaln

from utils.errors import DomainError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, int, np.ndarray]

# Largest split parameter a fitted beta-binomial can reach
THETA_MAX = 1e8


class PolyaKind(IntEnum):
    """The constant c of the generalized factorial"""
    HYPERGEOMETRIC = -1
    BINOMIAL = 0
    BETA_BINOMIAL = 1

    @property
    def c(self) -> int:
        return int(self.value)


def as_kind(c: Union[int, PolyaKind]) -> PolyaKind:
    try:
        return PolyaKind(int(c))
    except (ValueError, TypeError):
        raise DomainError(f"Pólya constant c must be -1, 0 or 1, got {c!r}")


@dataclass(frozen=True)
class SplitTheta:
    """Split parameters (theta1, theta2) of one internal node"""
    theta1: float
    theta2: float

    def __post_init__(self):
        if not (self.theta1 > 0 and self.theta2 > 0):
            raise DomainError(f"theta must be positive, got ({self.theta1}, {self.theta2})")
        if not (math.isfinite(self.theta1) and math.isfinite(self.theta2)):
            raise DomainError(f"theta must be finite, got ({self.theta1}, {self.theta2})")

    @classmethod
    def from_proportion(cls, p1: float, sigma: float) -> "SplitTheta":
        """Build theta from the mean proportion p1 and sigma = 1/(theta1 + theta2)"""
        if not 0 < p1 < 1:
            raise DomainError(f"p1 must lie in (0, 1), got {p1}")
        if sigma <= 0:
            raise DomainError(f"sigma must be positive, got {sigma}")
        return cls(p1 / sigma, (1.0 - p1) / sigma)

    @property
    def total(self) -> float:
        return self.theta1 + self.theta2

    @property
    def p1(self) -> float:
        return self.theta1 / self.total

    @property
    def sigma(self) -> float:
        return 1.0 / self.total

    def swapped(self) -> "SplitTheta":
        return SplitTheta(self.theta2, self.theta1)

    def check_kind(self, kind: Union[int, PolyaKind]) -> None:
        if as_kind(kind) is PolyaKind.HYPERGEOMETRIC:
            if not (float(self.theta1).is_integer() and float(self.theta2).is_integer()):
                raise DomainError("hypergeometric splits need integer theta")


def _validate_theta(theta: np.ndarray, kind: PolyaKind) -> None:
    if np.any(~(theta > 0)) or np.any(~np.isfinite(theta)):
        raise DomainError(f"theta must be positive and finite, got {theta}")
    if kind is PolyaKind.HYPERGEOMETRIC and np.any(theta != np.floor(theta)):
        raise DomainError(f"hypergeometric splits need integer theta, got {theta}")


def _validate_counts(n: np.ndarray, name: str = "n") -> None:
    if np.any(n < 0) or np.any(n != np.floor(n)):
        raise DomainError(f"{name} must be non-negative integers")


def _log_gen_factorial(theta: np.ndarray, n: np.ndarray, kind: PolyaKind) -> np.ndarray:
    """Unchecked log (theta)_(n,c) for broadcastable arrays"""
    theta = np.asarray(theta, dtype=float)
    n = np.asarray(n, dtype=float)
    if kind is PolyaKind.BINOMIAL:
        # n * log(theta) with 0 * log(.) = 0
        return np.where(n > 0, n * np.log(theta), 0.0)
    if kind is PolyaKind.BETA_BINOMIAL:
        return gammaln(theta + n) - gammaln(theta)
    # a zero factor appears once n exceeds theta
    vals = gammaln(theta + 1.0) - gammaln(np.maximum(theta - n, 0.0) + 1.0)
    return np.where(n <= theta, vals, -np.inf)


def _scalar_or_array(values: np.ndarray) -> ArrayLike:
    return float(values) if np.ndim(values) == 0 else values


def log_gen_factorial(theta: ArrayLike, n: ArrayLike, c: Union[int, PolyaKind]) -> ArrayLike:
    """Log of the generalized factorial (theta)_(n,c) = prod_{t<n} (theta + c t)

    Args:
        theta: Positive base (integer when c = -1)
        n: Number of factors
        c: Pólya constant

    Returns:
        The log value; -inf when a falling factorial reaches a zero factor
    """
    kind = as_kind(c)
    theta = np.asarray(theta, dtype=float)
    n = np.asarray(n, dtype=float)
    _validate_theta(theta, kind)
    _validate_counts(n)
    return _scalar_or_array(_log_gen_factorial(theta, n, kind))


def log_binom_coef(n: ArrayLike, k: ArrayLike) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    k = np.asarray(k, dtype=float)
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def log_split_pmf_arrays(n1: ArrayLike, n2: ArrayLike, theta1: ArrayLike,
                         theta2: ArrayLike, kind: PolyaKind) -> np.ndarray:
    """Vectorized, unchecked log pmf of the bivariate Pólya split"""
    n1 = np.asarray(n1, dtype=float)
    n2 = np.asarray(n2, dtype=float)
    theta1 = np.asarray(theta1, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    numerator = (_log_gen_factorial(theta1, n1, kind)
                 + _log_gen_factorial(theta2, n2, kind))
    denominator = _log_gen_factorial(theta1 + theta2, n1 + n2, kind)
    with np.errstate(invalid="ignore"):
        value = log_binom_coef(n1 + n2, n1) + numerator - denominator
    return np.where(np.isneginf(numerator), -np.inf, value)


def log_split_pmf(n1: ArrayLike, n2: ArrayLike, theta: SplitTheta,
                  c: Union[int, PolyaKind]) -> ArrayLike:
    """Log pmf of (n1, n2) under the Pólya split of n = n1 + n2

    c = 0 is binomial(n, theta1/(theta1+theta2)), c = 1 beta-binomial and
    c = -1 hypergeometric.
    """
    kind = as_kind(c)
    theta.check_kind(kind)
    n1 = np.asarray(n1, dtype=float)
    n2 = np.asarray(n2, dtype=float)
    _validate_counts(n1, "n1")
    _validate_counts(n2, "n2")
    return _scalar_or_array(
        log_split_pmf_arrays(n1, n2, theta.theta1, theta.theta2, kind))


def draw_split(n: ArrayLike, theta1: ArrayLike, theta2: ArrayLike, kind: PolyaKind,
               rng: np.random.Generator) -> np.ndarray:
    """Vectorized draw of the first component of a Pólya split of n"""
    n = np.asarray(n, dtype=np.int64)
    shape = np.broadcast(n, np.asarray(theta1), np.asarray(theta2)).shape
    if kind is PolyaKind.BINOMIAL:
        p1 = np.asarray(theta1, dtype=float) / (np.asarray(theta1) + np.asarray(theta2))
        return rng.binomial(n, p1, size=shape)
    if kind is PolyaKind.BETA_BINOMIAL:
        q = rng.beta(theta1, theta2, size=shape)
        return rng.binomial(n, q, size=shape)
    ngood = np.asarray(theta1, dtype=np.int64)
    nbad = np.asarray(theta2, dtype=np.int64)
    if np.any(n > ngood + nbad):
        raise DomainError("hypergeometric split of more items than theta1 + theta2")
    return rng.hypergeometric(ngood, nbad, n, size=shape)


def sample_split(n: ArrayLike, theta: SplitTheta, c: Union[int, PolyaKind],
                 rng: np.random.Generator) -> Tuple[ArrayLike, ArrayLike]:
    """Draw (n1, n - n1) from the Pólya split of n

    Args:
        n: Total to split (scalar or array)
        theta: Split parameters
        c: Pólya constant
        rng: Caller-owned random generator

    Returns:
        Tuple (n1, n2) with the shape of n
    """
    kind = as_kind(c)
    theta.check_kind(kind)
    n_arr = np.asarray(n)
    _validate_counts(n_arr)
    n1 = draw_split(n_arr, theta.theta1, theta.theta2, kind, rng)
    n2 = n_arr - n1
    if np.ndim(n1) == 0:
        return int(n1), int(n2)
    return n1, n2


def split_moment_ratio(theta_a: ArrayLike, theta_b: ArrayLike, k: int,
                       kind: PolyaKind) -> ArrayLike:
    """(theta_a)_(k,c) / (theta_a + theta_b)_(k,c), the k-th factorial moment
    of the group share per unit of (n)_k"""
    num = _log_gen_factorial(theta_a, k, kind)
    den = _log_gen_factorial(np.asarray(theta_a) + np.asarray(theta_b), k, kind)
    with np.errstate(invalid="ignore"):
        ratio = np.exp(num - den)
    return _scalar_or_array(np.where(np.isneginf(num), 0.0, ratio))


def polya_split_covariance(theta: SplitTheta, c: Union[int, PolyaKind],
                           mu1: float, mu2: float) -> float:
    """Covariance of the two components of a Pólya split whose total has
    first and second factorial moments mu1 and mu2"""
    kind = as_kind(c)
    s = theta.total
    return theta.theta1 * theta.theta2 / (s ** 2 * (s + kind.c)) * (s * mu2 - (s + kind.c) * mu1 ** 2)


class GlobalAbundanceLaw(ABC):
    """Univariate law of the total count, optionally zero-inflated"""

    def __init__(self, zi_pi: float = 0.0):
        if not 0.0 <= zi_pi <= 1.0:
            raise DomainError(f"zero-inflation probability must lie in [0, 1], got {zi_pi}")
        self.zi_pi = float(zi_pi)

    @property
    @abstractmethod
    def family(self) -> str:
        """Family name used in reports and model files"""

    @abstractmethod
    def _log_pmf(self, n: np.ndarray) -> np.ndarray:
        """Log pmf of the non-inflated law"""

    @abstractmethod
    def _factorial_moment(self, k: int) -> float:
        """k-th factorial moment of the non-inflated law"""

    @abstractmethod
    def _sample(self, size, rng: np.random.Generator) -> np.ndarray:
        """Draws from the non-inflated law"""

    def log_pmf(self, n: ArrayLike) -> ArrayLike:
        n = np.asarray(n, dtype=float)
        _validate_counts(n)
        base = self._log_pmf(n)
        with np.errstate(divide="ignore"):
            log_pi = np.log(self.zi_pi)
            log_keep = np.log1p(-self.zi_pi)
        inflated = np.where(n == 0, np.logaddexp(log_pi, log_keep + base), log_keep + base)
        return _scalar_or_array(inflated)

    def factorial_moment(self, k: int) -> float:
        if k < 1:
            raise DomainError(f"factorial moment order must be >= 1, got {k}")
        return (1.0 - self.zi_pi) * self._factorial_moment(k)

    def mean(self) -> float:
        return self.factorial_moment(1)

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        draws = self._sample(size, rng)
        if self.zi_pi > 0:
            draws = np.where(rng.random(size) < self.zi_pi, 0, draws)
        return draws

    def tail_quantile(self, tail_mass: float = 1e-12) -> int:
        """Smallest n with P(N > n) <= tail_mass"""
        n, total = 0, 0.0
        while True:
            total += float(np.exp(self.log_pmf(n)))
            if 1.0 - total <= tail_mass:
                return n
            n += 1


class PoissonLaw(GlobalAbundanceLaw):
    """Poisson(rate) total abundance"""

    def __init__(self, rate: float, zi_pi: float = 0.0):
        super().__init__(zi_pi)
        if not rate > 0:
            raise DomainError(f"Poisson rate must be positive, got {rate}")
        self.rate = float(rate)

    @property
    def family(self) -> str:
        return "poisson"

    def _log_pmf(self, n):
        return n * np.log(self.rate) - self.rate - gammaln(n + 1.0)

    def _factorial_moment(self, k):
        return self.rate ** k

    def _sample(self, size, rng):
        return rng.poisson(self.rate, size=size)

    def __repr__(self):
        return f"PoissonLaw(rate={self.rate}, zi_pi={self.zi_pi})"


class NegativeBinomialLaw(GlobalAbundanceLaw):
    """Negative binomial total abundance with size r and mean mu

    The success probability view is p = r / (r + mu), so the pmf is
    Gamma(n + r) / (Gamma(r) n!) p^r (1 - p)^n.
    """

    def __init__(self, size: float, mean: float, zi_pi: float = 0.0):
        super().__init__(zi_pi)
        if not (size > 0 and mean > 0):
            raise DomainError(f"NB size and mean must be positive, got ({size}, {mean})")
        self.size = float(size)
        self.mu = float(mean)

    @classmethod
    def from_size_prob(cls, size: float, p: float, zi_pi: float = 0.0) -> "NegativeBinomialLaw":
        if not 0 < p < 1:
            raise DomainError(f"NB probability must lie in (0, 1), got {p}")
        return cls(size, size * (1.0 - p) / p, zi_pi)

    @property
    def family(self) -> str:
        return "negbin"

    @property
    def p(self) -> float:
        return self.size / (self.size + self.mu)

    def _log_pmf(self, n):
        r = self.size
        return (gammaln(n + r) - gammaln(r) - gammaln(n + 1.0)
                + r * np.log(self.p) + n * np.log1p(-self.p))

    def _factorial_moment(self, k):
        return math.exp(gammaln(self.size + k) - gammaln(self.size)) * (self.mu / self.size) ** k

    def _sample(self, size, rng):
        return rng.negative_binomial(self.size, self.p, size=size)

    def __repr__(self):
        return f"NegativeBinomialLaw(size={self.size}, mean={self.mu}, zi_pi={self.zi_pi})"


def log_global_pmf(n: ArrayLike, law: GlobalAbundanceLaw) -> ArrayLike:
    """Log pmf of the total abundance under its (possibly zero-inflated) law"""
    return law.log_pmf(n)
