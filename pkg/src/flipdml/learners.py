"""Penalized prediction machinery used for nuisance estimation.

Ridge regression is solved through the singular value decomposition of the
centered (and by default standardized) design, which makes the whole
regularization path cheap once the decomposition is known.  Principal
component regression uses the same decomposition truncated to the leading
components.  Binary targets are handled by an L2-penalized logistic model
fitted with Newton / iteratively reweighted least squares.

All penalties follow the unscaled convention

    ridge:     ||y - b0 - X b||^2 + lam * ||b||^2
    logistic:  -loglik(b0, b) + lam / 2 * ||b||^2

with the intercept never penalized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

RANK_RTOL = 1e-10


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SpectralDecomposition:
    """Thin SVD ``X = U diag(s) V^T`` with singular values in descending order."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        if self.s.size == 0 or self.s[0] == 0:
            return 0
        return int(np.sum(self.s > RANK_RTOL * self.s[0] * max(self.U.shape[0], 1)))

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.s) @ self.V.T


def svd_decompose(X) -> SpectralDecomposition:
    U, s, Vt = np.linalg.svd(np.asarray(X, dtype=float), full_matrices=False)
    return SpectralDecomposition(U=U, s=s, V=Vt.T)


def _prepare(X, standardize):
    """Center (and optionally scale) columns; return transformed X, mean and scale."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    mean = X.mean(axis=0)
    Xc = X - mean
    if standardize:
        scale = Xc.std(axis=0, ddof=1) if X.shape[0] > 1 else np.ones(X.shape[1])
        # constant columns carry no information; leave them at zero
        scale = np.where(scale > 0, scale, 1.0)
        Xc = Xc / scale
    else:
        scale = np.ones(X.shape[1])
    return Xc, mean, scale


@dataclass
class LinearFit:
    """Shared prediction logic for models with a linear predictor."""

    coef: np.ndarray
    intercept: float

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coef + self.intercept

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X)


@dataclass
class RidgeFit(LinearFit):
    lam: float = 0.0
    x_mean: np.ndarray = field(default=None, repr=False)
    x_scale: np.ndarray = field(default=None, repr=False)


@dataclass
class PcrFit(LinearFit):
    k: int = 0
    x_mean: np.ndarray = field(default=None, repr=False)
    x_scale: np.ndarray = field(default=None, repr=False)


@dataclass
class LogisticRidgeFit(LinearFit):
    lam: float = 0.0
    converged: bool = False
    iterations: int = 0
    objective_trace: list = field(default_factory=list, repr=False)
    x_mean: np.ndarray = field(default=None, repr=False)
    x_scale: np.ndarray = field(default=None, repr=False)

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X)


def ridge_spectral_weights(s, lam) -> np.ndarray:
    """Shrinkage factors ``s_j^2 / (s_j^2 + lam)`` applied to each left singular direction."""
    s = np.asarray(s, dtype=float)
    return s**2 / (s**2 + lam)


def _ridge_coef_from_svd(svd: SpectralDecomposition, yc, lam):
    s = svd.s
    if lam == 0:
        r = svd.rank
        if r < s.size:
            raise np.linalg.LinAlgError(
                "lam=0 on a rank-deficient design has no unique least squares solution"
            )
        d = 1.0 / s
    else:
        d = s / (s**2 + lam)
    return svd.V @ (d * (svd.U.T @ yc))


def fit_ridge(X, y, lam: float, standardize: bool = True) -> RidgeFit:
    """Ridge regression with an unpenalized intercept.

    Coefficients are computed as ``V diag(s / (s^2 + lam)) U^T y_c`` on the
    centered design and reported on the original column scale.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] < 2:
        raise ValueError("ridge needs at least two observations")
    Xs, mean, scale = _prepare(X, standardize)
    if Xs.shape[0] != y.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    ybar = y.mean()
    svd = svd_decompose(Xs)
    beta_s = _ridge_coef_from_svd(svd, y - ybar, lam)
    coef = beta_s / scale
    return RidgeFit(coef=coef, intercept=ybar - mean @ coef, lam=float(lam), x_mean=mean, x_scale=scale)


def ridge_path(X, y, lams, standardize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients (original scale) and intercepts for every penalty in ``lams``.

    Returns ``(coefs, intercepts)`` with ``coefs`` of shape ``(len(lams), p)``.
    One decomposition serves the whole path.
    """
    y = np.asarray(y, dtype=float).ravel()
    Xs, mean, scale = _prepare(X, standardize)
    ybar = y.mean()
    svd = svd_decompose(Xs)
    uty = svd.U.T @ (y - ybar)
    lams = np.asarray(lams, dtype=float)
    s = svd.s
    with np.errstate(divide="ignore", invalid="ignore"):
        d = s[None, :] / (s[None, :] ** 2 + lams[:, None])
    d = np.where(np.isfinite(d), d, 0.0)
    coefs = (d * uty[None, :]) @ svd.V.T / scale[None, :]
    intercepts = ybar - coefs @ mean
    return coefs, intercepts


def fit_pcr(X, y, k: int, standardize: bool = False) -> PcrFit:
    """Principal component regression on the ``k`` leading components.

    Fitted values equal ``ybar + sum_{j<=k} u_j u_j^T y_c``.
    """
    y = np.asarray(y, dtype=float).ravel()
    Xs, mean, scale = _prepare(X, standardize)
    svd = svd_decompose(Xs)
    if k < 0 or k > svd.rank:
        raise ValueError(f"k={k} outside [0, rank={svd.rank}]")
    ybar = y.mean()
    Uk, sk, Vk = svd.U[:, :k], svd.s[:k], svd.V[:, :k]
    beta_s = Vk @ ((Uk.T @ (y - ybar)) / sk)
    coef = beta_s / scale
    return PcrFit(coef=coef, intercept=ybar - mean @ coef, k=int(k), x_mean=mean, x_scale=scale)


def _logistic_objective(eta, y, beta, lam):
    # -loglik = sum(log(1 + exp(eta)) - y * eta)
    return float(np.sum(np.logaddexp(0.0, eta) - y * eta) + 0.5 * lam * beta @ beta)


def fit_logistic_ridge(
    X,
    y,
    lam: float,
    standardize: bool = True,
    max_iter: int = 100,
    tol: float = 1e-8,
    init: tuple[float, np.ndarray] | None = None,
) -> LogisticRidgeFit:
    """L2-penalized logistic regression by Newton steps with step halving.

    The slopes are penalized, the intercept is not.  Convergence is declared
    when the gradient norm of the penalized objective drops below ``tol``.
    A fit that exhausts ``max_iter`` is returned with ``converged=False``
    and a :class:`ConvergenceWarning`.

    ``init`` optionally supplies ``(intercept, coef)`` on the internal
    standardized scale for warm starts along a penalty path.
    """
    if lam <= 0:
        raise ValueError("logistic ridge requires lam > 0")
    y = np.asarray(y, dtype=float).ravel()
    classes = np.unique(y)
    if not np.array_equal(classes, [0.0, 1.0]):
        raise ValueError("y must be binary with both classes present")
    Xs, mean, scale = _prepare(X, standardize)
    n, p = Xs.shape
    A = np.column_stack([np.ones(n), Xs])
    pen = np.full(p + 1, lam)
    pen[0] = 0.0

    if init is None:
        ybar = y.mean()
        w = np.zeros(p + 1)
        w[0] = np.log(ybar / (1 - ybar))
    else:
        w = np.concatenate([[init[0]], init[1]])

    eta = A @ w
    obj = _logistic_objective(eta, y, w[1:], lam)
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        grad = A.T @ (mu - y) + pen * w
        if np.linalg.norm(grad) < tol:
            converged = True
            it -= 1
            break
        W = mu * (1 - mu)
        H = (A * W[:, None]).T @ A
        H[np.diag_indices_from(H)] += pen
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        for _ in range(50):
            w_new = w - t * step
            eta_new = A @ w_new
            obj_new = _logistic_objective(eta_new, y, w_new[1:], lam)
            # tolerate rounding noise at the optimum
            if obj_new <= obj + 1e-13 * max(1.0, abs(obj)):
                break
            t *= 0.5
        else:
            # no descent possible at machine precision
            break
        w, eta, obj = w_new, eta_new, obj_new
        trace.append(obj)
    if not converged:
        grad = A.T @ (expit(eta) - y) + pen * w
        converged = bool(np.linalg.norm(grad) < tol)

    if not converged:
        warnings.warn(
            f"logistic ridge did not converge in {max_iter} iterations (lam={lam:g})",
            ConvergenceWarning,
            stacklevel=2,
        )
    coef = w[1:] / scale
    fit = LogisticRidgeFit(
        coef=coef,
        intercept=float(w[0] - mean @ coef),
        lam=float(lam),
        converged=converged,
        iterations=it,
        objective_trace=trace,
        x_mean=mean,
        x_scale=scale,
    )
    fit._internal = (float(w[0]), w[1:].copy())
    return fit


# ---------------------------------------------------------------------------
# cross-validation


def default_lambda_grid(X, num: int = 50, standardize: bool = True) -> np.ndarray:
    """Log-spaced penalties over ``[1e-4, 1e4]`` times the mean column sum of squares.

    The column sum of squares is taken on the matrix that actually gets
    penalized (centered, standardized when requested), so the grid scales
    with the sample size.
    """
    Xs, _, _ = _prepare(X, standardize)
    col_ss = np.sum(Xs**2, axis=0)
    col_ss = col_ss[col_ss > 0]
    scale = float(col_ss.mean()) if col_ss.size else 1.0
    return np.logspace(-4, 4, num) * scale


def fold_ids(n: int, folds: int, rng: np.random.Generator, strata=None) -> np.ndarray:
    """Random fold labels; with ``strata`` every stratum is spread evenly across folds."""
    ids = np.empty(n, dtype=int)
    if strata is None:
        perm = rng.permutation(n)
        ids[perm] = np.arange(n) % folds
        return ids
    strata = np.asarray(strata)
    offset = 0
    for level in np.unique(strata):
        idx = np.flatnonzero(strata == level)
        perm = rng.permutation(idx)
        ids[perm] = (np.arange(idx.size) + offset) % folds
        offset += idx.size
    return ids


@dataclass
class CvResult:
    lam: float
    lambdas: np.ndarray
    mean_loss: np.ndarray
    se_loss: np.ndarray
    fold_ids: np.ndarray
    rule: str


def _logloss(y, p):
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))


def _logistic_path_losses(Xtr, ytr, Xte, yte, lams, standardize):
    # warm start from the most heavily penalized end
    order = np.argsort(lams)[::-1]
    losses = np.empty(len(lams))
    init = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for j in order:
            fit = fit_logistic_ridge(Xtr, ytr, lams[j], standardize=standardize, init=init)
            init = fit._internal
            losses[j] = _logloss(yte, fit.predict_proba(Xte))
    return losses


def cross_validate(
    X,
    y,
    lambdas=None,
    folds: int = 10,
    loss: str = "mse",
    seed=0,
    rule: str = "min",
    standardize: bool = True,
    on_single_class: str = "refold",
) -> CvResult:
    """K-fold selection of the ridge penalty.

    ``loss="mse"`` tunes linear ridge, ``loss="logloss"`` tunes logistic
    ridge (folds are then stratified by class).  Mean held-out loss is
    computed per penalty; ``rule="min"`` (default) returns the minimizer and
    ``rule="1se"`` the largest penalty whose loss is within one standard
    error of the minimum.  Exact ties always resolve toward the larger
    penalty.  The 1se rule over-shrinks nuisance models and biases
    doubly robust estimates; keep ``min`` for cross-fitting.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if loss not in ("mse", "logloss"):
        raise ValueError(f"unknown loss {loss!r}")
    if rule not in ("min", "1se"):
        raise ValueError(f"unknown rule {rule!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n = y.shape[0]
    if lambdas is None:
        lambdas = default_lambda_grid(X, standardize=standardize)
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size == 0:
        raise ValueError("lambda grid is empty")
    if folds > n:
        raise ValueError("more folds than observations")
    rng = np.random.default_rng(seed)

    if loss == "logloss":
        for attempt in range(10):
            ids = fold_ids(n, folds, rng, strata=y)
            ok = all(np.unique(y[ids != f]).size == 2 for f in range(folds))
            if ok:
                break
            if on_single_class == "error":
                raise ValueError("a training fold contains a single class")
        else:
            raise ValueError("could not build folds with both classes in every training set")
    else:
        ids = fold_ids(n, folds, rng)

    fold_losses = np.empty((folds, lambdas.size))
    for f in range(folds):
        tr, te = ids != f, ids == f
        if loss == "mse":
            coefs, icpt = ridge_path(X[tr], y[tr], lambdas, standardize=standardize)
            pred = X[te] @ coefs.T + icpt[None, :]
            fold_losses[f] = np.mean((y[te][:, None] - pred) ** 2, axis=0)
        else:
            fold_losses[f] = _logistic_path_losses(X[tr], y[tr], X[te], y[te], lambdas, standardize)

    mean_loss = fold_losses.mean(axis=0)
    se_loss = fold_losses.std(axis=0, ddof=1) / np.sqrt(folds)
    best = np.min(mean_loss)
    if rule == "min":
        ok = np.isclose(mean_loss, best, rtol=1e-12, atol=0.0)
    else:
        jmin = int(np.flatnonzero(mean_loss == best)[np.argmax(lambdas[mean_loss == best])])
        ok = mean_loss <= best + se_loss[jmin]
    chosen = float(np.max(lambdas[ok]))
    return CvResult(
        lam=chosen, lambdas=lambdas, mean_loss=mean_loss, se_loss=se_loss, fold_ids=ids, rule=rule
    )


# ---------------------------------------------------------------------------
# learner objects used by the cross-fitting engine


@dataclass
class _TunedLearner:
    """Shared penalty handling: tune by CV unless ``lam`` is fixed."""

    cv_folds: int = 10
    lambdas: np.ndarray | None = None
    rule: str = "min"
    standardize: bool = True
    lam: float | None = None

    _loss = "mse"

    def tune(self, X, y, seed=0) -> CvResult:
        return cross_validate(
            X, y, self.lambdas, self.cv_folds, self._loss, seed, self.rule, self.standardize
        )

    def tuned(self, X, y, seed=0):
        """Copy of this learner with the penalty fixed by cross-validation on ``(X, y)``."""
        return replace(self, lam=self.tune(X, y, seed).lam)

    def fit(self, X, y, seed=0):
        cv = None
        lam = self.lam
        if lam is None:
            cv = self.tune(X, y, seed)
            lam = cv.lam
        fit = self._fit(X, y, lam)
        fit.cv = cv
        return fit


@dataclass
class RidgeLearner(_TunedLearner):
    """Ridge regression with the penalty tuned by K-fold cross-validation."""

    def _fit(self, X, y, lam):
        return fit_ridge(X, y, lam, standardize=self.standardize)


@dataclass
class LogisticRidgeLearner(_TunedLearner):
    """Logistic ridge classifier with the penalty tuned by cross-validated log loss."""

    _loss = "logloss"

    def _fit(self, X, y, lam):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            return fit_logistic_ridge(X, y, lam, standardize=self.standardize)


@dataclass
class PcrLearner:
    """Principal component regression with a fixed number of components."""

    k: int
    standardize: bool = True

    def fit(self, X, y, seed=0) -> PcrFit:
        return fit_pcr(X, y, min(self.k, np.linalg.matrix_rank(np.asarray(X) - np.mean(X, 0))),
                       standardize=self.standardize)


@dataclass
class OlsLearner:
    """Unpenalized least squares; used for deliberately simple nuisance models."""

    def fit(self, X, y, seed=0) -> RidgeFit:
        return fit_ridge(X, y, 0.0, standardize=False)


@dataclass
class ConstantLearner:
    """Predicts the training mean; a deliberately misspecified nuisance model."""

    def fit(self, X, y, seed=0) -> LinearFit:
        X = np.asarray(X)
        return LinearFit(coef=np.zeros(X.shape[1]), intercept=float(np.mean(y)))
