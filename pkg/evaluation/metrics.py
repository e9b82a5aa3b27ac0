import numpy as np

from utils.errors import DomainError


def _check(observed, predicted):
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if observed.shape != predicted.shape:
        raise DomainError(f"shape mismatch: observed {observed.shape}, predicted {predicted.shape}")
    if observed.size == 0:
        raise DomainError("no cells to compare")
    if np.any(predicted < 0):
        raise DomainError("predictions must be non-negative")
    return observed, predicted


def mae_log1p(observed, predicted) -> float:
    """Mean absolute error between log(1 + y) and log(1 + prediction) over all cells"""
    observed, predicted = _check(observed, predicted)
    return float(np.mean(np.abs(np.log1p(observed) - np.log1p(predicted))))


def rmse(observed, predicted) -> float:
    """Root mean squared error on raw counts over all cells"""
    observed, predicted = _check(observed, predicted)
    return float(np.sqrt(np.mean((observed - predicted) ** 2)))
