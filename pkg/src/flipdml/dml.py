"""Cross-fitted double/debiased machine learning for the average treatment effect.

Two models are supported:

* ``interactive``: outcome regressions ``g(0, x)`` and ``g(1, x)`` are fitted
  separately on the control and treated parts of each training fold and
  combined with the propensity ``m(x)`` in the doubly robust (AIPW) score.
* ``partially_linear``: ``y = theta d + h(x) + u``; ``E[y|x]`` and ``m(x)``
  are partialled out and theta is the residual-on-residual slope.

Each repetition draws a fresh fold split; repetitions are aggregated with
the median rule.  Every repetition owns a seed spawned from the master seed
so serial and parallel runs produce identical numbers.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .datamodel import Dataset, build_design_matrix
from .inference import EstimationError
from .learners import ConstantLearner, LogisticRidgeLearner, RidgeLearner, fold_ids

MODELS = ("interactive", "partially_linear")


class OverlapError(EstimationError):
    """Estimated propensities leave no common support."""


@dataclass(frozen=True)
class DmlConfig:
    folds: int = 5
    repetitions: int = 100
    clip: float = 0.01
    model: str = "interactive"
    seed: int = 0
    cv_folds: int = 10
    n_jobs: int = 1
    boundary_warn_share: float = 0.05
    tune_per_fold: bool = False

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not 0 < self.clip < 0.5:
            raise ValueError("clip must lie in (0, 0.5)")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")


@dataclass
class AteEstimate:
    theta: float
    se: float
    ci: tuple[float, float]
    thetas: np.ndarray
    ses: np.ndarray
    model: str
    n: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def p_value(self) -> float:
        if self.se == 0:
            return 0.0 if self.theta != 0 else 1.0
        return float(2 * stats.norm.sf(abs(self.theta / self.se)))


Z975 = float(stats.norm.ppf(0.975))


def _make_estimate(theta, se, thetas, ses, model, n, diagnostics):
    return AteEstimate(
        theta=float(theta),
        se=float(se),
        ci=(float(theta - Z975 * se), float(theta + Z975 * se)),
        thetas=np.asarray(thetas, dtype=float),
        ses=np.asarray(ses, dtype=float),
        model=model,
        n=int(n),
        diagnostics=diagnostics,
    )


def aggregate_repetitions(thetas, ses, model="interactive", n=0, diagnostics=None) -> AteEstimate:
    """Median aggregation across repetitions.

    ``theta = median(theta_r)`` and
    ``se = median(sqrt(se_r^2 + (theta_r - theta)^2))`` so that dispersion
    across fold splits inflates the reported uncertainty.
    """
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    ses = np.atleast_1d(np.asarray(ses, dtype=float))
    if thetas.size < 1 or thetas.shape != ses.shape:
        raise ValueError("need matching, nonempty theta and se sequences")
    theta = float(np.median(thetas))
    se = float(np.median(np.sqrt(ses**2 + (thetas - theta) ** 2)))
    return _make_estimate(theta, se, thetas, ses, model, n, dict(diagnostics or {}))


# ---------------------------------------------------------------------------
# scores


def aipw_score(y, d, g0, g1, m) -> np.ndarray:
    """Per-observation doubly robust score whose mean is the ATE estimate."""
    return g1 - g0 + d * (y - g1) / m - (1 - d) * (y - g0) / (1 - m)


def aipw_from_nuisance(y, d, g0, g1, m):
    psi = aipw_score(y, d, g0, g1, m)
    theta = psi.mean()
    se = psi.std() / np.sqrt(psi.size)
    return float(theta), float(se), psi - theta


def plr_from_nuisance(y, d, ell, m, tol=1e-12):
    """Residual-on-residual slope and its sandwich standard error."""
    u = y - ell
    v = d - m
    vv = float(v @ v)
    if vv < tol * max(1, v.size):
        raise EstimationError("treatment residuals vanish; no identifying variation")
    theta = float(v @ u) / vv
    psi = (u - theta * v) * v
    J = vv / v.size
    se = np.sqrt(np.mean(psi**2) / J**2 / v.size)
    return theta, float(se), psi


def clip_propensity(m, clip, warn_share):
    m = np.asarray(m, dtype=float)
    at_bound = (m <= clip) | (m >= 1 - clip)
    share = float(at_bound.mean())
    if share >= 1.0:
        raise OverlapError(
            "every propensity lies at the clipping boundary; common support "
            "0 < P(d=1|x) < 1 is violated"
        )
    notes = []
    if share > warn_share:
        notes.append(f"{share:.1%} of propensities at the clipping boundary (overlap warning)")
    return np.clip(m, clip, 1 - clip), share, notes


# ---------------------------------------------------------------------------
# cross-fitting


def _is_binary(y) -> bool:
    vals = np.unique(y)
    return vals.size <= 2 and set(vals.tolist()) <= {0.0, 1.0}


def _fit_predict(learner, X_tr, y_tr, X_te, seed):
    if _is_binary(y_tr) and np.unique(y_tr).size < 2:
        learner = ConstantLearner()
    return np.asarray(learner.fit(X_tr, y_tr, seed=seed).predict(X_te), dtype=float)


def _default_learners(y, cv_folds):
    outcome = LogisticRidgeLearner(cv_folds=cv_folds) if _is_binary(y) else RidgeLearner(cv_folds=cv_folds)
    return outcome, LogisticRidgeLearner(cv_folds=cv_folds)


def _pretune(learner, X, y, seed):
    """Fix the learner's penalty by cross-validation on the whole sample, if it tunes."""
    if not hasattr(learner, "tuned") or getattr(learner, "lam", None) is not None:
        return learner
    if _is_binary(y) and np.unique(y).size < 2:
        return learner
    return learner.tuned(X, y, seed)


def crossfit_nuisance(y, d, X, folds, seed, model, outcome_learner, propensity_learner, tune_per_fold=False):
    """Out-of-fold nuisance predictions for one fold split.

    Unless ``tune_per_fold`` is set, tunable learners get their penalty from a
    single cross-validation on the full sample of this repetition and are then
    refitted on every training fold with that penalty.

    Returns a dict with ``m`` and either ``g0``/``g1`` (interactive) or
    ``ell`` (partially linear), plus the fold labels.
    """
    n = y.shape[0]
    ss = np.random.SeedSequence(seed)
    split_ss, tune_ss, *fold_ss = ss.spawn(folds + 2)
    ids = fold_ids(n, folds, np.random.default_rng(split_ss), strata=d)
    learners = {"m": propensity_learner}
    if model == "interactive":
        learners["g0"] = learners["g1"] = outcome_learner
    else:
        learners["ell"] = outcome_learner
    if not tune_per_fold:
        t = [int(x) for x in tune_ss.generate_state(3)]
        learners["m"] = _pretune(propensity_learner, X, d, t[0])
        if model == "interactive":
            learners["g0"] = _pretune(outcome_learner, X[d == 0], y[d == 0], t[1])
            learners["g1"] = _pretune(outcome_learner, X[d == 1], y[d == 1], t[2])
        else:
            learners["ell"] = _pretune(outcome_learner, X, y, t[1])

    out = {key: np.empty(n) for key in learners}
    out["fold_ids"] = ids
    for f in range(folds):
        tr, te = ids != f, ids == f
        s = [int(x) for x in fold_ss[f].generate_state(3)]
        out["m"][te] = _fit_predict(learners["m"], X[tr], d[tr], X[te], s[0])
        if model == "interactive":
            for arm, key, sd in ((0, "g0", s[1]), (1, "g1", s[2])):
                sub = tr & (d == arm)
                if sub.sum() < 2:
                    raise EstimationError(f"training fold {f} has fewer than 2 units with d={arm}")
                out[key][te] = _fit_predict(learners[key], X[sub], y[sub], X[te], sd)
        else:
            out["ell"][te] = _fit_predict(learners["ell"], X[tr], y[tr], X[te], s[1])
    return out


def _one_repetition(args):
    y, d, X, cfg, seed, outcome_learner, propensity_learner = args
    nu = crossfit_nuisance(
        y, d, X, cfg.folds, seed, cfg.model, outcome_learner, propensity_learner, cfg.tune_per_fold
    )
    return _score_repetition(y, d, nu, cfg)


def _score_repetition(y, d, nu, cfg):
    if cfg.model == "interactive":
        m, share, notes = clip_propensity(nu["m"], cfg.clip, cfg.boundary_warn_share)
        theta, se, score = aipw_from_nuisance(y, d, nu["g0"], nu["g1"], m)
    else:
        if np.all(nu["m"] <= 0) or np.all(nu["m"] >= 1):
            raise OverlapError("propensity predictions are degenerate")
        share, notes = float(np.mean((nu["m"] <= cfg.clip) | (nu["m"] >= 1 - cfg.clip))), []
        theta, se, score = plr_from_nuisance(y, d, nu["ell"], nu["m"])
    return theta, se, float(np.mean(score)), share, notes


def repetition_seeds(seed, repetitions) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(repetitions)
    return [int(c.generate_state(1)[0]) for c in children]


def run_dml(
    y,
    d,
    X,
    config: DmlConfig = DmlConfig(),
    outcome_learner=None,
    propensity_learner=None,
    nuisance: dict | None = None,
) -> AteEstimate:
    """Estimate the ATE of binary ``d`` on ``y`` adjusting for covariates ``X``.

    ``nuisance`` bypasses learning altogether: pass arrays ``g0``, ``g1`` and
    ``m`` (interactive) or ``ell`` and ``m`` (partially linear), e.g. the
    true functions of a simulated cohort.  Such a run has a single effective
    repetition.
    """
    y = np.asarray(y, dtype=float).ravel()
    d = np.asarray(d, dtype=float).ravel()
    n = y.shape[0]
    if np.unique(d).size < 2:
        raise EstimationError("treatment is constant; no identifying variation")
    if not set(np.unique(d).tolist()) <= {0.0, 1.0}:
        raise ValueError("treatment must be coded 0/1")
    cfg = config

    if nuisance is not None:
        nu = {k: np.asarray(v, dtype=float) for k, v in nuisance.items()}
        theta, se, mscore, share, notes = _score_repetition(y, d, nu, cfg)
        diag = {"mean_score": mscore, "boundary_share": share, "warnings": notes, "repetitions": 1}
        return _make_estimate(theta, se, [theta], [se], cfg.model, n, diag)

    X = np.asarray(X, dtype=float)
    default_out, default_prop = _default_learners(y, cfg.cv_folds)
    outcome_learner = outcome_learner or default_out
    propensity_learner = propensity_learner or default_prop
    seeds = repetition_seeds(cfg.seed, cfg.repetitions)
    jobs = [(y, d, X, cfg, s, outcome_learner, propensity_learner) for s in seeds]
    if cfg.n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as ex:
            results = list(ex.map(_one_repetition, jobs))
    else:
        results = [_one_repetition(j) for j in jobs]

    thetas = [r[0] for r in results]
    ses = [r[1] for r in results]
    notes = sorted({w for r in results for w in r[4]})
    diag = {
        "mean_score": float(max(abs(r[2]) for r in results)),
        "boundary_share": float(np.mean([r[3] for r in results])),
        "warnings": notes,
        "repetitions": cfg.repetitions,
    }
    for w in notes:
        warnings.warn(w, RuntimeWarning, stacklevel=2)
    return aggregate_repetitions(thetas, ses, cfg.model, n, diag)


def _dataset_arrays(ds: Dataset, covariates, outcome):
    X = build_design_matrix(ds, covariates).matrix
    y = ds.outcome(outcome)
    if np.isnan(y).any():
        raise EstimationError(f"outcome {outcome!r} has missing values; select a sample first")
    return y, ds.d, X


def estimate_ate_interactive(ds: Dataset, covariates, outcome: str, cfg: DmlConfig = DmlConfig(), **kw) -> AteEstimate:
    y, d, X = _dataset_arrays(ds, covariates, outcome)
    return run_dml(y, d, X, replace(cfg, model="interactive"), **kw)


def estimate_ate_partially_linear(ds: Dataset, covariates, outcome: str, cfg: DmlConfig = DmlConfig(), **kw) -> AteEstimate:
    y, d, X = _dataset_arrays(ds, covariates, outcome)
    return run_dml(y, d, X, replace(cfg, model="partially_linear"), **kw)
