"""Classical test theory: scale scores, Cronbach's alpha and item-total correlations."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats


def as_block(block) -> np.ndarray:
    """Validate an item block (n x q, Likert codes -3..3, NaN allowed)."""
    B = np.asarray(block, dtype=float)
    if B.ndim != 2 or B.shape[1] < 1 or B.shape[0] < 1:
        raise ValueError("item block must be a nonempty n x q matrix")
    vals = B[~np.isnan(B)]
    if np.any((vals < -3) | (vals > 3)) or np.any(vals != np.round(vals)):
        raise ValueError("item responses must be integer codes in -3..3")
    return B


def score_scale_means(block) -> np.ndarray:
    """Row means of a polarity-aligned item block."""
    B = as_block(block)
    return B.mean(axis=1)


@dataclass
class AlphaResult:
    alpha: float
    ci: tuple[float, float]
    n: int
    q: int


def cronbach_alpha(block, level: float = 0.95) -> AlphaResult:
    """Cronbach's alpha with a Feldt F-distribution confidence interval.

    ``alpha = q/(q-1) * (1 - sum(item variances) / var(total))``.  The
    interval uses ``(1 - alpha) / (1 - A) ~ F(n-1, (n-1)(q-1))``.
    """
    B = np.asarray(block, dtype=float)
    n, q = B.shape
    if q < 2:
        raise ValueError("alpha needs at least two items")
    if n < 3:
        raise ValueError("alpha needs at least three respondents")
    item_var = B.var(axis=0, ddof=1).sum()
    total_var = B.sum(axis=1).var(ddof=1)
    if total_var == 0:
        raise ValueError("total score has zero variance")
    alpha = q / (q - 1) * (1 - item_var / total_var)
    df1, df2 = n - 1, (n - 1) * (q - 1)
    tail = (1 - level) / 2
    lo = 1 - (1 - alpha) * stats.f.ppf(1 - tail, df1, df2)
    hi = 1 - (1 - alpha) * stats.f.ppf(tail, df1, df2)
    return AlphaResult(float(alpha), (float(lo), float(hi)), n, q)


def standardized_alpha(block) -> float:
    """Alpha computed from the correlation matrix: ``q r / (1 + (q-1) r)`` with mean r."""
    R = np.corrcoef(np.asarray(block, dtype=float), rowvar=False)
    q = R.shape[0]
    rbar = (R.sum() - q) / (q * (q - 1))
    return float(q * rbar / (1 + (q - 1) * rbar))


def item_total_correlations(block) -> np.ndarray:
    """Corrected item-total correlations (item against the sum of the other items).

    Constant items (or a constant rest score) give NaN with a warning.
    """
    B = np.asarray(block, dtype=float)
    q = B.shape[1]
    if q < 2:
        raise ValueError("need at least two items")
    total = B.sum(axis=1)
    out = np.full(q, np.nan)
    for j in range(q):
        rest = total - B[:, j]
        if B[:, j].std() == 0 or rest.std() == 0:
            warnings.warn(f"item {j} or its rest score is constant", RuntimeWarning, stacklevel=2)
            continue
        out[j] = np.corrcoef(B[:, j], rest)[0, 1]
    return out
