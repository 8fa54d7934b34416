"""Regression adjustment with robust standard errors and cohort balance tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .datamodel import Dataset, ScaleDefinition, build_design_matrix


class EstimationError(RuntimeError):
    pass


@dataclass
class OlsResult:
    theta: float
    se: float
    p_value: float
    coef: np.ndarray
    robust_se: np.ndarray
    p_values: np.ndarray
    columns: tuple[str, ...]
    residuals: np.ndarray
    cov: np.ndarray
    hc: str
    n: int

    @property
    def ci(self) -> tuple[float, float]:
        q = stats.t.ppf(0.975, self.n - len(self.coef))
        return self.theta - q * self.se, self.theta + q * self.se


def sandwich_cov(X: np.ndarray, resid: np.ndarray, hc: str = "HC1") -> np.ndarray:
    """Heteroskedasticity-consistent covariance ``(X'X)^-1 X' diag(w e^2) X (X'X)^-1``."""
    n, k = X.shape
    XtX_inv = np.linalg.inv(X.T @ X)
    e2 = resid**2
    if hc == "HC0":
        w = e2
    elif hc == "HC1":
        w = e2 * n / (n - k)
    elif hc == "HC3":
        h = np.einsum("ij,jk,ik->i", X, XtX_inv, X)
        w = e2 / (1 - h) ** 2
    else:
        raise ValueError(f"unknown robust covariance flavor {hc!r}")
    meat = (X * w[:, None]).T @ X
    cov = XtX_inv @ meat @ XtX_inv
    return (cov + cov.T) / 2


def ols_robust(d, y, X=None, hc: str = "HC1", columns=None) -> OlsResult:
    """Regress ``y`` on an intercept, ``d`` and the covariate block ``X``."""
    d = np.asarray(d, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    n = y.shape[0]
    if X is None:
        X = np.empty((n, 0))
    X = np.asarray(X, dtype=float)
    A = np.column_stack([np.ones(n), d, X])
    k = A.shape[1]
    if k >= n:
        raise EstimationError(
            f"{k} regressors for {n} observations; use the DML estimators for p >= n"
        )
    if np.linalg.matrix_rank(A) < k:
        raise EstimationError("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    cov = sandwich_cov(A, resid, hc)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = coef / se
    pvals = 2 * stats.t.sf(np.abs(tstat), n - k)
    pvals = np.where(se > 0, pvals, np.where(coef == 0, 1.0, 0.0))
    cols = ("const", "d", *(columns if columns is not None else [f"x{j}" for j in range(X.shape[1])]))
    return OlsResult(
        theta=float(coef[1]),
        se=float(se[1]),
        p_value=float(pvals[1]),
        coef=coef,
        robust_se=se,
        p_values=pvals,
        columns=cols,
        residuals=resid,
        cov=cov,
        hc=hc,
        n=n,
    )


def first_principal_component(block: np.ndarray) -> np.ndarray:
    """Scores on the first principal component of the standardized block.

    The sign is fixed so that the first item loads nonnegatively.
    """
    Z = (block - block.mean(axis=0)) / block.std(axis=0, ddof=1)
    _, _, Vt = np.linalg.svd(Z, full_matrices=False)
    v = Vt[0]
    if v[0] < 0:
        v = -v
    return Z @ v


def ols_covariates(
    ds: Dataset,
    base_covariates,
    scales,
    variant: str,
    raw_scales=("repetition",),
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Covariate block for the three regression-adjustment variants.

    ``ols1`` uses every item, ``ols2`` the mean of each reduced scale and
    ``ols3`` the first principal component of each reduced scale.  Scales
    named in ``raw_scales`` always enter item by item.
    """
    if variant not in ("ols1", "ols2", "ols3"):
        raise ValueError(f"unknown OLS variant {variant!r}")
    scales = [ds.schema.scale(s) if isinstance(s, str) else s for s in scales]
    base = build_design_matrix(ds, base_covariates)
    blocks, cols = [base.matrix], list(base.columns)
    raw_names = {r.lower() for r in raw_scales}
    for sd in scales:
        items = ds.items(sd)
        if variant == "ols1" or sd.name.lower() in raw_names:
            blocks.append(items)
            cols.extend(sd.items)
        elif variant == "ols2":
            blocks.append(items.mean(axis=1, keepdims=True))
            cols.append(f"{sd.name}_mean")
        else:
            blocks.append(first_principal_component(items)[:, None])
            cols.append(f"{sd.name}_pc1")
    return np.column_stack(blocks), tuple(cols)


def fit_ols_robust(
    ds: Dataset,
    outcome: str,
    base_covariates,
    scales: list[ScaleDefinition] | None = None,
    variant: str = "ols1",
    hc: str = "HC1",
    raw_scales=("repetition",),
) -> OlsResult:
    scales = ds.schema.scales if scales is None else scales
    X, cols = ols_covariates(ds, base_covariates, scales, variant, raw_scales)
    return ols_robust(ds.d, ds.outcome(outcome), X, hc=hc, columns=cols)


# ---------------------------------------------------------------------------
# mean comparison


@dataclass
class MeanTestResult:
    mean_a: float
    mean_b: float
    t: float
    df: float
    p_value: float


def welch_mean_test(a, b) -> MeanTestResult:
    """Two-sided Welch t test with Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = a[~np.isnan(a)], b[~np.isnan(b)]
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least two observations")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0:
        raise ValueError("both groups have zero variance; the t statistic is undefined")
    t = diff / np.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = float(min(1.0, 2 * stats.t.sf(abs(t), df)))
    return MeanTestResult(float(a.mean()), float(b.mean()), float(t), float(df), p)


def chi2_homogeneity(values, groups) -> float:
    """p-value of the chi-square test that category shares agree across groups."""
    table = pd.crosstab(pd.Series(values, name="v"), pd.Series(groups, name="g"))
    if table.shape[0] < 2:
        return 1.0
    chi2, p, _, _ = stats.chi2_contingency(table.to_numpy(), correction=False)
    return float(p)


def balance_table(ds: Dataset, variables, categorical=()) -> pd.DataFrame:
    """Cohort means (or level shares) and comparison p-values per variable.

    Real-valued variables use Welch's test; variables listed in
    ``categorical`` get one row per level plus a single chi-square p-value
    on the header row.
    """
    d = ds.d
    rows = []
    for var in variables:
        col = ds.frame[var]
        if var in categorical:
            mask = col.notna().to_numpy()
            p = chi2_homogeneity(col[mask].astype(str).to_numpy(), d[mask])
            rows.append({"variable": var, "level": "", "cohort_0": np.nan, "cohort_1": np.nan, "p_value": p})
            for level in sorted(col.dropna().unique(), key=str):
                ind = (col == level).to_numpy(dtype=float)
                rows.append(
                    {
                        "variable": var,
                        "level": str(level),
                        "cohort_0": ind[mask & (d == 0)].mean(),
                        "cohort_1": ind[mask & (d == 1)].mean(),
                        "p_value": np.nan,
                    }
                )
        else:
            x = col.to_numpy(dtype=float)
            res = welch_mean_test(x[d == 0], x[d == 1])
            rows.append(
                {"variable": var, "level": "", "cohort_0": res.mean_a, "cohort_1": res.mean_b, "p_value": res.p_value}
            )
    return pd.DataFrame(rows)
