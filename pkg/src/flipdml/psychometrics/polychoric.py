"""Two-step polychoric correlations for ordinal items.

Step one takes the thresholds of each item from its cumulative marginal
proportions through the inverse normal CDF.  Step two maximizes the
bivariate-normal likelihood of the contingency table over the correlation
alone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

RHO_BOUND = 0.999


def bvn_cdf(h, k, rho) -> np.ndarray:
    """Standard bivariate normal CDF ``P(X <= h, Y <= k)`` with correlation ``rho``.

    Evaluated through Owen's T function; infinite limits are supported.
    """
    h, k = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(k, dtype=float))
    out = np.empty(h.shape)
    Phi = special.ndtr
    hinf_lo, kinf_lo = np.isneginf(h), np.isneginf(k)
    hinf_hi, kinf_hi = np.isposinf(h), np.isposinf(k)
    zero = hinf_lo | kinf_lo
    out[zero] = 0.0
    m = ~zero & hinf_hi & kinf_hi
    out[m] = 1.0
    m = ~zero & hinf_hi & ~kinf_hi
    out[m] = Phi(k[m])
    m = ~zero & kinf_hi & ~hinf_hi
    out[m] = Phi(h[m])
    fin = np.isfinite(h) & np.isfinite(k)
    if np.any(fin):
        hh, kk = h[fin].copy(), k[fin].copy()
        # Owen's formula divides by h and k; nudge exact zeros
        hh[hh == 0] = 1e-15
        kk[kk == 0] = 1e-15
        r = np.sqrt((1 - rho) * (1 + rho))
        ah = (kk - rho * hh) / (hh * r)
        ak = (hh - rho * kk) / (kk * r)
        beta = np.where(hh * kk > 0, 0.0, 0.5)
        val = 0.5 * Phi(hh) + 0.5 * Phi(kk) - special.owens_t(hh, ah) - special.owens_t(kk, ak) - beta
        out[fin] = np.clip(val, 0.0, 1.0)
    return out


def thresholds_from_margins(x) -> tuple[np.ndarray, np.ndarray]:
    """Observed categories and the interior thresholds between them."""
    cats, counts = np.unique(x, return_counts=True)
    cum = np.cumsum(counts)[:-1] / counts.sum()
    return cats, stats.norm.ppf(cum)


def cell_probabilities(tx, ty, rho, cdf=bvn_cdf) -> np.ndarray:
    ex = np.concatenate([[-np.inf], tx, [np.inf]])
    ey = np.concatenate([[-np.inf], ty, [np.inf]])
    F = cdf(ex[:, None], ey[None, :], rho)
    return np.clip(np.diff(np.diff(F, axis=0), axis=1), 1e-300, None)


def contingency(x, y):
    cx, ix = np.unique(x, return_inverse=True)
    cy, iy = np.unique(y, return_inverse=True)
    table = np.zeros((cx.size, cy.size))
    np.add.at(table, (ix, iy), 1)
    return table


@dataclass
class PolychoricPair:
    rho: float
    at_bound: bool
    loglik: float


def polychoric_pair(x, y) -> PolychoricPair:
    """Two-step ML polychoric correlation of two ordinal vectors."""
    x = np.asarray(x)
    y = np.asarray(y)
    keep = ~(np.isnan(x.astype(float)) | np.isnan(y.astype(float)))
    x, y = x[keep], y[keep]
    table = contingency(x, y)
    if table.shape[0] < 2 or table.shape[1] < 2:
        raise ValueError("each item needs at least two observed categories")
    _, tx = thresholds_from_margins(x)
    _, ty = thresholds_from_margins(y)

    def nll(rho):
        return -float(np.sum(table * np.log(cell_probabilities(tx, ty, rho))))

    res = optimize.minimize_scalar(nll, bounds=(-RHO_BOUND, RHO_BOUND), method="bounded",
                                   options={"xatol": 1e-8})
    rho = float(res.x)
    # the bounded search never lands exactly on the bound; check the edges explicitly
    for edge in (-RHO_BOUND, RHO_BOUND):
        if nll(edge) <= res.fun:
            rho = edge
    at_bound = abs(rho) >= RHO_BOUND - 1e-6
    if at_bound:
        rho = float(np.sign(rho) * RHO_BOUND)
    return PolychoricPair(rho=rho, at_bound=at_bound, loglik=-nll(rho))


@dataclass
class PolychoricResult:
    matrix: np.ndarray
    boundary_pairs: list


def polychoric_matrix(block) -> PolychoricResult:
    """Pairwise polychoric correlation matrix with unit diagonal.

    Pairs whose estimate sits on the clipping bound are listed in
    ``boundary_pairs`` and raise a warning.
    """
    B = np.asarray(block, dtype=float)
    q = B.shape[1]
    for j in range(q):
        if np.unique(B[~np.isnan(B[:, j]), j]).size < 2:
            raise ValueError(f"item {j} has fewer than two observed categories")
    R = np.eye(q)
    flagged = []
    for i in range(q):
        for j in range(i + 1, q):
            pr = polychoric_pair(B[:, i], B[:, j])
            R[i, j] = R[j, i] = pr.rho
            if pr.at_bound:
                flagged.append((i, j))
    if flagged:
        warnings.warn(f"{len(flagged)} polychoric pair(s) at the +/-{RHO_BOUND} bound", RuntimeWarning, stacklevel=2)
    return PolychoricResult(matrix=R, boundary_pairs=flagged)
