"""One-factor confirmatory factor analysis by maximum likelihood.

The implied covariance is ``Sigma = lambda lambda' + diag(psi)`` and the
discrepancy minimized is

    F_ML = log|Sigma| + tr(S Sigma^-1) - log|S| - q

with S the ML (divisor n) sample covariance.  The congeneric model frees
every loading; the tau-equivalent model forces one common loading.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

PSI_FLOOR = 1e-4


class IdentificationError(ValueError):
    pass


@dataclass
class CfaFit:
    loadings: np.ndarray
    uniquenesses: np.ndarray
    model: str
    f_ml: float
    n: int
    std_loadings: np.ndarray
    std_uniquenesses: np.ndarray
    residuals: np.ndarray  # standardized residual covariance (S - Sigma) / sd_i sd_j
    heywood: bool = False
    converged: bool = True
    notes: list = field(default_factory=list)

    @property
    def implied(self) -> np.ndarray:
        return np.outer(self.loadings, self.loadings) + np.diag(self.uniquenesses)

    @property
    def chi2(self) -> float:
        return self.n * self.f_ml

    @property
    def df(self) -> int:
        q = self.loadings.size
        k = 2 * q if self.model == "congeneric" else q + 1
        return q * (q + 1) // 2 - k

    @property
    def srmr(self) -> float:
        """Root mean square of the off-diagonal standardized residuals."""
        q = self.residuals.shape[0]
        off = self.residuals[np.tril_indices(q, -1)]
        return float(np.sqrt(np.mean(off**2))) if off.size else 0.0


def f_ml(S, Sigma) -> float:
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        return np.inf
    _, logdet_s = np.linalg.slogdet(S)
    q = S.shape[0]
    return float(logdet + np.trace(np.linalg.solve(Sigma, S)) - logdet_s - q)


def _unpack(theta, q, model):
    if model == "congeneric":
        lam, logpsi = theta[:q], theta[q:]
    else:
        lam, logpsi = np.full(q, theta[0]), theta[1:]
    return lam, np.exp(logpsi)


def _objective(theta, S, model):
    q = S.shape[0]
    lam, psi = _unpack(theta, q, model)
    Sigma = np.outer(lam, lam) + np.diag(psi)
    try:
        Sinv = np.linalg.inv(Sigma)
    except np.linalg.LinAlgError:
        return np.inf, np.zeros_like(theta)
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        return np.inf, np.zeros_like(theta)
    val = logdet + np.trace(Sinv @ S)
    G = Sinv - Sinv @ S @ Sinv
    g_lam = 2 * G @ lam
    g_psi = np.diag(G) * psi
    if model == "congeneric":
        grad = np.concatenate([g_lam, g_psi])
    else:
        grad = np.concatenate([[g_lam.sum()], g_psi])
    return val, grad


def fit_unidimensional_cfa(block, model: str = "congeneric", restarts: int = 10, seed: int = 0) -> CfaFit:
    """Fit a one-factor model to the covariance matrix of ``block``.

    Bounded L-BFGS on ``(lambda, log psi)`` from a principal-axis start plus
    ``restarts`` seeded random starts; the best solution is kept.
    Uniquenesses are floored at 1e-4; hitting the floor marks a Heywood case.
    """
    if model not in ("congeneric", "tau_equivalent"):
        raise ValueError(f"unknown model {model!r}")
    B = np.asarray(block, dtype=float)
    B = B[~np.isnan(B).any(axis=1)]
    n, q = B.shape
    if model == "congeneric" and q < 3:
        raise IdentificationError("the congeneric one-factor model needs at least 3 items")
    if q < 2:
        raise IdentificationError("need at least 2 items")
    S = np.cov(B, rowvar=False, bias=True)
    if np.any(np.diag(S) <= 0):
        raise ValueError("an item has zero variance")

    # principal-axis style start
    evals, evecs = np.linalg.eigh(S)
    v = evecs[:, -1] * np.sqrt(max(evals[-1], 1e-6))
    if v.sum() < 0:
        v = -v
    psi0 = np.clip(np.diag(S) - v**2, 0.1 * np.diag(S), None)
    starts = []
    if model == "congeneric":
        starts.append(np.concatenate([v, np.log(psi0)]))
    else:
        starts.append(np.concatenate([[v.mean()], np.log(psi0)]))
    rng = np.random.default_rng(seed)
    sd = np.sqrt(np.diag(S))
    for _ in range(restarts):
        frac = rng.uniform(0.2, 0.9, q)
        lam = sd * np.sqrt(frac)
        psi = np.diag(S) * (1 - frac)
        lam0 = lam if model == "congeneric" else np.array([lam.mean()])
        starts.append(np.concatenate([lam0, np.log(psi)]))

    nl = q if model == "congeneric" else 1
    bounds = [(None, None)] * nl + [(np.log(PSI_FLOOR), np.log(10 * np.max(np.diag(S))))] * q
    best = None
    for x0 in starts:
        res = optimize.minimize(
            _objective, x0, args=(S, model), jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": 2000, "ftol": 1e-14, "gtol": 1e-10},
        )
        if best is None or res.fun < best.fun:
            best = res

    # L-BFGS-B reports line-search failures at exact fits; judge by the projected gradient
    _, grad = _objective(best.x, S, model)
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    grad = np.where((best.x <= lo + 1e-12) & (grad > 0), 0.0, grad)
    grad = np.where((best.x >= hi - 1e-12) & (grad < 0), 0.0, grad)
    converged = bool(best.success or np.max(np.abs(grad)) < 1e-6)

    lam, psi = _unpack(best.x, q, model)
    if lam.sum() < 0:
        lam = -lam
    Sigma = np.outer(lam, lam) + np.diag(psi)
    F = f_ml(S, Sigma)
    implied_sd = np.sqrt(np.diag(Sigma))
    std_lam = lam / implied_sd
    std_psi = psi / np.diag(Sigma)
    obs_sd = np.sqrt(np.diag(S))
    resid = (S - Sigma) / np.outer(obs_sd, obs_sd)
    heywood = bool(np.any(psi <= PSI_FLOOR * 1.0001))
    notes = []
    if heywood:
        notes.append("Heywood case: a uniqueness reached the lower bound")
    if not converged:
        notes.append(f"optimizer did not converge: {best.message}")
    return CfaFit(
        loadings=lam,
        uniquenesses=psi,
        model=model,
        f_ml=F,
        n=n,
        std_loadings=std_lam,
        std_uniquenesses=std_psi,
        residuals=resid,
        heywood=heywood,
        converged=converged,
        notes=notes,
    )


def mcdonald_omega(fit: CfaFit) -> float:
    """Omega total from the standardized one-factor solution."""
    lam = np.abs(fit.std_loadings.sum())
    return float(lam**2 / (lam**2 + fit.std_uniquenesses.sum()))


def omega_from_parameters(loadings, uniquenesses) -> float:
    lam = np.sum(loadings)
    return float(lam**2 / (lam**2 + np.sum(uniquenesses)))


@dataclass
class TauEquivalenceTest:
    chi2: float
    df: int
    p_value: float
    f_congeneric: float
    f_tau: float


def compare_tau_equivalence(congeneric: CfaFit, tau: CfaFit) -> TauEquivalenceTest:
    """Likelihood-ratio test of equal loadings against the congeneric model."""
    q = congeneric.loadings.size
    diff = max(tau.f_ml - congeneric.f_ml, 0.0)
    chi2 = congeneric.n * diff
    df = q - 1
    return TauEquivalenceTest(chi2, df, float(stats.chi2.sf(chi2, df)), congeneric.f_ml, tau.f_ml)
