"""Sampling adequacy and component-retention criteria for a correlation matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

# draws held in memory per batch of parallel-analysis replications
PA_BATCH_ELEMENTS = 2_000_000


@dataclass
class AdequacyResult:
    kmo: float
    kmo_items: np.ndarray
    bartlett_chi2: float
    bartlett_df: int
    bartlett_p: float
    determinant: float
    singular: bool = False


def anti_image_correlations(R) -> tuple[np.ndarray, bool]:
    """Partial correlations of each pair given all other variables."""
    R = np.asarray(R, dtype=float)
    singular = False
    try:
        P = np.linalg.inv(R)
        if not np.all(np.isfinite(P)) or np.linalg.cond(R) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        P = np.linalg.pinv(R)
        singular = True
    d = np.sqrt(np.abs(np.diag(P)))
    Q = -P / np.outer(d, d)
    np.fill_diagonal(Q, 1.0)
    return Q, singular


def sampling_adequacy(R, n: int) -> AdequacyResult:
    """Kaiser-Meyer-Olkin index, Bartlett's sphericity test and the determinant."""
    R = np.asarray(R, dtype=float)
    q = R.shape[0]
    if not np.allclose(R, R.T) or not np.allclose(np.diag(R), 1.0):
        raise ValueError("R must be a symmetric matrix with unit diagonal")
    Q, singular = anti_image_correlations(R)
    off = ~np.eye(q, dtype=bool)
    r2 = np.where(off, R**2, 0.0)
    q2 = np.where(off, Q**2, 0.0)
    # undefined (0/0) when every correlation is zero
    with np.errstate(invalid="ignore", divide="ignore"):
        kmo = float(r2.sum() / (r2.sum() + q2.sum()))
        kmo_items = r2.sum(axis=0) / (r2.sum(axis=0) + q2.sum(axis=0))
    det = float(np.linalg.det(R))
    df = q * (q - 1) // 2
    if det <= 0:
        chi2, p = np.inf, 0.0
        det = max(det, 0.0)
        singular = True
    else:
        chi2 = -(n - 1 - (2 * q + 5) / 6) * np.log(det)
        chi2 = max(float(chi2), 0.0) + 0.0
        p = float(stats.chi2.sf(chi2, df))
    return AdequacyResult(kmo, kmo_items, float(chi2), df, p, det, singular)


def ekc_reference(eigenvalues, n: int) -> np.ndarray:
    """Empirical Kaiser Criterion reference eigenvalues.

    ``ref_j = max(((q - sum_{i<j} l_i) / (q - j + 1)) * (1 + sqrt(q/n))^2, 1)``.
    """
    l = np.asarray(eigenvalues, dtype=float)
    q = l.size
    prior = np.concatenate([[0.0], np.cumsum(l)[:-1]])
    j = np.arange(1, q + 1)
    ref = (q - prior) / (q - j + 1) * (1 + np.sqrt(q / n)) ** 2
    return np.maximum(ref, 1.0)


def parallel_analysis_reference(n: int, q: int, n_iter: int = 1000, percentile: float = 95.0, seed=0) -> np.ndarray:
    """Percentile of eigenvalues from correlation matrices of uncorrelated normal data.

    Each replication draws from its own child of ``SeedSequence(seed)``, so the
    reference does not depend on how replications are batched.
    """
    children = np.random.SeedSequence(seed).spawn(n_iter)
    evs = np.empty((n_iter, q))
    chunk = max(1, min(n_iter, PA_BATCH_ELEMENTS // max(n * q, 1)))
    for start in range(0, n_iter, chunk):
        m = min(chunk, n_iter - start)
        Z = np.stack([np.random.default_rng(c).standard_normal((n, q)) for c in children[start:start + m]])
        Z -= Z.mean(axis=1, keepdims=True)
        C = np.einsum("bni,bnj->bij", Z, Z)
        d = np.sqrt(np.einsum("bii->bi", C))
        C /= d[:, :, None] * d[:, None, :]
        evs[start:start + m] = np.linalg.eigvalsh(C)[:, ::-1]
    return np.percentile(evs, percentile, axis=0)


def _leading_count(values, reference) -> int:
    """Number of leading values exceeding their reference before the first failure."""
    above = np.asarray(values) > np.asarray(reference)
    return int(np.argmin(above)) if not above.all() else int(above.size)


@dataclass
class RetentionReport:
    eigenvalues: np.ndarray
    kgc: int
    jc: int
    ekc: int
    pa: int
    ekc_reference: np.ndarray
    pa_reference: np.ndarray
    adequacy: AdequacyResult | None = None
    notes: list = field(default_factory=list)

    def counts(self) -> dict:
        return {"KGC": self.kgc, "EKC": self.ekc, "PA": self.pa, "JC": self.jc}

    def scree(self) -> pd.DataFrame:
        q = self.eigenvalues.size
        return pd.DataFrame(
            {
                "component": np.arange(1, q + 1),
                "eigenvalue": self.eigenvalues,
                "pa_reference": self.pa_reference,
                "ekc_reference": self.ekc_reference,
            }
        )


def retention_criteria(
    eigenvalues, n: int, q: int | None = None, pa_iter: int = 1000, pa_percentile: float = 95.0, seed=0
) -> RetentionReport:
    """Kaiser-Guttman (>1), Jolliffe (>0.7), Empirical Kaiser and parallel analysis counts.

    EKC and PA count leading eigenvalues up to the first one that falls at or
    below its reference value.
    """
    l = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    q = l.size if q is None else q
    ekc_ref = ekc_reference(l, n)
    pa_ref = parallel_analysis_reference(n, q, pa_iter, pa_percentile, seed)
    return RetentionReport(
        eigenvalues=l,
        kgc=int(np.sum(l > 1.0)),
        jc=int(np.sum(l > 0.7)),
        ekc=_leading_count(l, ekc_ref),
        pa=_leading_count(l, pa_ref),
        ekc_reference=ekc_ref,
        pa_reference=pa_ref,
    )


def correlation_eigenvalues(R) -> np.ndarray:
    return np.linalg.eigvalsh(np.asarray(R, dtype=float))[::-1]


def pca_diagnostics(block, pa_iter: int = 1000, pa_percentile: float = 95.0, seed=0) -> RetentionReport:
    """Polychoric matrix, sampling adequacy and retention counts for one item block."""
    from .polychoric import polychoric_matrix

    B = np.asarray(block, dtype=float)
    B = B[~np.isnan(B).any(axis=1)]
    poly = polychoric_matrix(B)
    l = correlation_eigenvalues(poly.matrix)
    report = retention_criteria(l, B.shape[0], pa_iter=pa_iter, pa_percentile=pa_percentile, seed=seed)
    report.adequacy = sampling_adequacy(poly.matrix, B.shape[0])
    if poly.boundary_pairs:
        report.notes.append(f"polychoric pairs at bound: {poly.boundary_pairs}")
    if report.adequacy.singular:
        report.notes.append("polychoric matrix is singular; KMO from pseudo-inverse")
    return report
