"""Synthetic cohorts with known ground truth.

Likert items come from a one-factor-per-scale measurement model
``Z = F Lambda' + E`` discretized through fixed thresholds into -3..3.
Treatment follows a logistic propensity in the observed covariates and the
outcome is ``y = tau(x) d + h(x) + noise`` with the noise shared between the
two potential outcomes, so the sample ATE is known exactly.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit

from .datamodel import Dataset, SampleSpec, Schema, ScaleDefinition, validate_frame
from .usage import ClickerLog, QuizLog, VideoEventLog

DEFAULT_THRESHOLDS = (-1.8, -1.1, -0.4, 0.3, 1.0, 1.7)
SEMESTER_START = pd.Timestamp("2023-10-09T08:00:00Z")


@dataclass
class ScaleSpec:
    name: str
    loadings: list  # q loadings, or q x k matrix
    uniquenesses: list | None = None
    reverse: list | None = None
    questionnaire: str = "first"
    treatment_weight: float = 0.0
    outcome_weight: float = 0.0

    @property
    def loading_matrix(self) -> np.ndarray:
        L = np.asarray(self.loadings, dtype=float)
        return L[:, None] if L.ndim == 1 else L

    @property
    def psi(self) -> np.ndarray:
        L = self.loading_matrix
        if self.uniquenesses is None:
            return np.clip(1 - np.sum(L**2, axis=1), 1e-3, None)
        return np.asarray(self.uniquenesses, dtype=float)

    @property
    def items(self) -> list[str]:
        return [f"{self.name}_{j + 1}" for j in range(self.loading_matrix.shape[0])]


@dataclass
class CohortSpec:
    n: int = 420
    numeric_covariates: int = 4
    categorical_levels: tuple = (0.6, 0.3, 0.1)
    scales: list = field(default_factory=list)
    thresholds: tuple = DEFAULT_THRESHOLDS
    gamma0: float = 0.0
    gamma_numeric: list = field(default_factory=list)
    gamma_categorical: list = field(default_factory=list)
    outcome_intercept: float = 0.0
    beta_numeric: list = field(default_factory=list)
    beta_categorical: list = field(default_factory=list)
    outcome: str = "linear"  # or "nonlinear"
    nonlinear_strength: float = 1.0
    tau: float = 0.5
    tau_het: float = 0.0
    noise_sd: float = 1.0
    pass_threshold: float | None = None
    dropout_b: float = 0.0
    dropout_b_treated: float | None = None
    dropout_c: float = 0.0
    usage: bool = False
    usage_videos: int = 24
    usage_quizzes: int = 12
    usage_sessions: int = 12
    usage_catch_up: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.scales = [s if isinstance(s, ScaleSpec) else ScaleSpec(**s) for s in self.scales]
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("Likert thresholds must be strictly increasing")
        if len(self.thresholds) != 6:
            raise ValueError("seven Likert categories need six thresholds")
        for s in self.scales:
            q, k = s.loading_matrix.shape
            if k >= q:
                raise ValueError(f"scale {s.name}: factor count {k} must be below item count {q}")
        if self.outcome not in ("linear", "nonlinear"):
            raise ValueError("outcome must be 'linear' or 'nonlinear'")
        if self.numeric_covariates < 2 and self.outcome == "nonlinear":
            raise ValueError("nonlinear outcome needs at least two numeric covariates")
        self.gamma_numeric = _pad(self.gamma_numeric, self.numeric_covariates)
        self.beta_numeric = _pad(self.beta_numeric, self.numeric_covariates)
        ncat = max(len(self.categorical_levels) - 1, 0)
        self.gamma_categorical = _pad(self.gamma_categorical, ncat)
        self.beta_categorical = _pad(self.beta_categorical, ncat)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        d["categorical_levels"] = list(self.categorical_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        d = dict(d)
        for key in ("thresholds", "categorical_levels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def category_probabilities(self) -> np.ndarray:
        cuts = np.concatenate([[-np.inf], self.thresholds, [np.inf]])
        return np.diff(stats.norm.cdf(cuts))

    @property
    def numeric_names(self) -> list[str]:
        return [f"x{j + 1}" for j in range(self.numeric_covariates)]

    @property
    def covariates(self) -> list[str]:
        cols = list(self.numeric_names)
        if len(self.categorical_levels) > 1:
            cols.append("group")
        for s in self.scales:
            cols.extend(s.items)
        return cols


def _pad(values, size):
    v = list(values)[:size]
    return [float(x) for x in v] + [0.0] * (size - len(v))


def default_cohort_spec(**overrides) -> CohortSpec:
    """14 scales and 67 items split 202/218 by cohort; geometry only, no data claims."""
    sizes = [6, 6, 4, 4, 4, 4, 5, 4, 4, 7, 4, 6, 5, 4]
    names = [
        "affection", "difficulty", "effort", "extrinsic", "interest", "self_concept",
        "value", "critical", "environment", "procrastination", "peer",
        "self_regulation", "test_anxiety", "repetition",
    ]
    scales = []
    for name, q in zip(names, sizes):
        loads = [0.4 if name == "repetition" else 0.55 + 0.2 * ((j * 7) % 5) / 4 for j in range(q)]
        scales.append(ScaleSpec(name=name, loadings=loads, treatment_weight=0.05, outcome_weight=0.5))
    base = dict(
        n=420,
        scales=scales,
        gamma0=float(np.log(218 / 202)),
        gamma_numeric=[0.3, -0.2, 0.1, 0.0],
        outcome_intercept=28.0,
        beta_numeric=[3.0, 2.0, -1.0, 0.5],
        noise_sd=9.0,
        tau=-0.5,
        pass_threshold=20.0,
        dropout_b=0.26,
        dropout_c=0.27,
        usage=True,
    )
    base.update(overrides)
    return CohortSpec(**base)


@dataclass
class SyntheticCohort:
    dataset: Dataset
    raw: pd.DataFrame
    hidden: pd.DataFrame
    spec: CohortSpec
    video: VideoEventLog | None = None
    quiz: QuizLog | None = None
    clicker: ClickerLog | None = None

    @property
    def covariates(self) -> list[str]:
        return self.spec.covariates

    def samples(self) -> list[SampleSpec]:
        return [
            SampleSpec("A", ("exam_points", "passed")),
            SampleSpec("B", ("retention_points",)),
            SampleSpec("C", ("post_score",)),
        ]


def discretize(z, thresholds) -> np.ndarray:
    """Map standardized latent responses to Likert codes -3..3."""
    return np.searchsorted(np.asarray(thresholds), z, side="right") - 3


def _nonlinear_terms(x1, x2):
    # additive smooth pieces plus one interaction
    return (x1**2 - 1) + np.sin(2 * x2) + x1 * x2


def generate_cohort(spec: CohortSpec) -> SyntheticCohort:
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    probs = spec.category_probabilities()
    if np.any(probs * n < 1):
        warnings.warn("thresholds leave some Likert categories expected-empty", RuntimeWarning, stacklevel=2)

    X_num = rng.standard_normal((n, spec.numeric_covariates))
    ncat = len(spec.categorical_levels)
    group = rng.choice(ncat, size=n, p=np.asarray(spec.categorical_levels) / np.sum(spec.categorical_levels)) if ncat > 1 else np.zeros(n, int)
    G = np.column_stack([(group == j).astype(float) for j in range(1, ncat)]) if ncat > 1 else np.empty((n, 0))

    raw = {"student_id": [f"S{i:05d}" for i in range(n)]}
    for j, name in enumerate(spec.numeric_names):
        raw[name] = X_num[:, j]
    if ncat > 1:
        raw["group"] = [f"g{g}" for g in group]

    lin_t = spec.gamma0 + X_num @ np.asarray(spec.gamma_numeric) + G @ np.asarray(spec.gamma_categorical)
    lin_y = spec.outcome_intercept + X_num @ np.asarray(spec.beta_numeric) + G @ np.asarray(spec.beta_categorical)
    hidden = {}
    for s in spec.scales:
        L, psi = s.loading_matrix, s.psi
        F = rng.standard_normal((n, L.shape[1]))
        Z = F @ L.T + rng.standard_normal((n, L.shape[0])) * np.sqrt(psi)
        Z = Z / np.sqrt(np.sum(L**2, axis=1) + psi)
        items = discretize(Z, spec.thresholds)
        mean = items.mean(axis=1)
        lin_t = lin_t + s.treatment_weight * mean
        lin_y = lin_y + s.outcome_weight * mean
        rev = s.reverse or [False] * len(s.items)
        for col, r, vals in zip(s.items, rev, items.T):
            raw[col] = -vals if r else vals
        for j in range(F.shape[1]):
            hidden[f"{s.name}_factor{j + 1}"] = F[:, j]

    h = lin_y
    if spec.outcome == "nonlinear":
        h = h + spec.nonlinear_strength * _nonlinear_terms(X_num[:, 0], X_num[:, 1])
    tau_x = spec.tau + (spec.tau_het * X_num[:, 0] if spec.numeric_covariates else 0.0)
    prop = expit(lin_t)
    d = rng.binomial(1, prop)
    eps = rng.normal(0.0, spec.noise_sd, n)
    y0 = h + eps
    y1 = y0 + tau_x
    y = np.where(d == 1, y1, y0)

    raw["d"] = d
    raw["exam_points"] = y
    cut = spec.pass_threshold if spec.pass_threshold is not None else spec.outcome_intercept
    raw["passed"] = (y >= cut).astype(int)
    # retention test and second questionnaire; dropout sets nest (C misses include B misses)
    p_b = np.where(d == 1, spec.dropout_b if spec.dropout_b_treated is None else spec.dropout_b_treated, spec.dropout_b)
    u = rng.random(n)
    miss_b = u < p_b
    miss_c = miss_b | (rng.random(n) < spec.dropout_c)
    ret = 0.2 * (y - spec.outcome_intercept) / max(spec.noise_sd, 1e-9) + 5.5 + rng.normal(0, 1, n)
    post = 0.5 * tau_x * d + 0.2 * X_num[:, 0] + rng.normal(0, 1, n) if spec.numeric_covariates else rng.normal(0, 1, n)
    raw["retention_points"] = np.where(miss_b, np.nan, ret)
    raw["post_score"] = np.where(miss_c, np.nan, post)

    hidden.update(
        {"propensity": prop, "mu0": h, "mu1": h + tau_x, "y0": y0, "y1": y1, "tau": tau_x}
    )
    raw_df = pd.DataFrame(raw)
    schema = cohort_schema(spec)
    ds = validate_frame(raw_df, schema)
    hidden_df = pd.DataFrame(hidden)
    cohort = SyntheticCohort(dataset=ds, raw=raw_df, hidden=hidden_df, spec=spec)
    if spec.usage:
        cohort.video, cohort.quiz, cohort.clicker = _usage_logs(spec, raw_df, rng)
    return cohort


def cohort_schema(spec: CohortSpec) -> Schema:
    covs = {name: {"type": "real"} for name in spec.numeric_names}
    if len(spec.categorical_levels) > 1:
        covs["group"] = {
            "type": "categorical",
            "reference": "g0",
            "levels": [f"g{j}" for j in range(len(spec.categorical_levels))],
        }
    return Schema.from_dict(
        {
            "id": "student_id",
            "treatment": "d",
            "outcomes": ["exam_points", "passed", "retention_points", "post_score"],
            "covariates": covs,
            "scales": [
                ScaleDefinition(s.name, s.items, s.reverse or (), s.questionnaire).to_dict()
                for s in spec.scales
            ],
        }
    )


def oracle_ate(cohort: SyntheticCohort) -> float:
    """Sample mean of ``y1 - y0`` over the cohort."""
    return float(np.mean(cohort.hidden["y1"] - cohort.hidden["y0"]))


# ---------------------------------------------------------------------------
# usage logs


def _usage_logs(spec: CohortSpec, raw: pd.DataFrame, rng):
    treated = raw.loc[raw["d"] == 1]
    ids = treated["student_id"].to_numpy()
    pts = treated["exam_points"].to_numpy()
    z = (pts - pts.mean()) / (pts.std() + 1e-12) if len(pts) > 1 else np.zeros(len(pts))
    engage = expit(0.3 + 1.2 * z)

    nv = spec.usage_videos
    per_week = max(1, nv // 12)
    segs = 60 + (np.arange(nv) * 37) % 120
    due = [SEMESTER_START + pd.Timedelta(days=7 * (v // per_week) + 2) for v in range(nv)]
    exam = SEMESTER_START + pd.Timedelta(days=120)
    catalog = pd.DataFrame({"video_id": [f"V{v:02d}" for v in range(nv)], "n_segments": segs, "due": due})

    vids = catalog["video_id"].to_numpy()
    due_ns = np.array([t.value for t in due], dtype=np.int64)
    late_span = (exam.value - due_ns) // 10**9
    chunks = []
    for sid, e in zip(ids, engage):
        for v in range(nv):
            if rng.random() >= e:
                continue
            intime = rng.random() < e
            share_due = np.clip(e + rng.normal(0, 0.15), 0.05, 1.0) if intime else 0.0
            share_tot = share_due + (1 - share_due) * rng.random() * spec.usage_catch_up
            order = rng.permutation(segs[v])
            n_due = int(round(share_due * segs[v]))
            n_tot = max(int(round(share_tot * segs[v])), n_due, 1)
            # timely views fall in the three days before the due time, the rest before the exam
            early = rng.integers(0, 3 * 86400 - 1, n_due) - 3 * 86400
            late = rng.integers(1, late_span[v], n_tot - n_due)
            offs = np.concatenate([early, late]) * 10**9
            chunks.append((sid, v, order[:n_tot], due_ns[v] + offs))
    cols = ["student_id", "video_id", "segment", "timestamp"]
    if chunks:
        sizes = [len(c[2]) for c in chunks]
        events = pd.DataFrame({
            "student_id": np.repeat([c[0] for c in chunks], sizes),
            "video_id": vids[np.repeat([c[1] for c in chunks], sizes)],
            "segment": np.concatenate([c[2] for c in chunks]).astype(int),
            "timestamp": pd.to_datetime(np.concatenate([c[3] for c in chunks]), utc=True),
        })
    else:
        events = pd.DataFrame(columns=cols)
    video = VideoEventLog(catalog=catalog, events=events, exam_time=exam)

    nq = spec.usage_quizzes
    qcat = pd.DataFrame({"quiz_id": [f"Q{q:02d}" for q in range(nq)], "n_questions": 8})
    qrows = []
    for sid, e in zip(ids, engage):
        for q in range(nq):
            if rng.random() < e:
                ans = int(np.clip(round(8 * (e + rng.normal(0, 0.1))), 1, 8))
                qrows.append((sid, qcat.quiz_id[q], ans, ans * rng.random(), SEMESTER_START + pd.Timedelta(days=7 * q + 1)))
    attempts = pd.DataFrame(qrows, columns=["student_id", "quiz_id", "answered", "points", "submitted_at"])
    quiz = QuizLog(catalog=qcat, attempts=attempts)

    ns = spec.usage_sessions
    scat = pd.DataFrame({"session_id": [f"C{s:02d}" for s in range(ns)], "relevant": 5})
    crows = []
    for sid, e in zip(ids, engage):
        for s in range(ns):
            if rng.random() < e:
                crows.append((sid, scat.session_id[s], int(rng.binomial(5, e))))
    part = pd.DataFrame(crows, columns=["student_id", "session_id", "answered"])
    clicker = ClickerLog(sessions=scat, participation=part)
    return video, quiz, clicker


# ---------------------------------------------------------------------------
# export


def export_cohort(cohort: SyntheticCohort, out_dir) -> dict:
    """Write the cohort as datamodel CSV + JSON config, plus usage-log CSVs.

    Returns the pipeline configuration dict that was written to
    ``pipeline_config.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cohort.raw.to_csv(out / "cohort.csv", index=False, float_format="%.10g")
    cohort.hidden.to_csv(out / "cohort_hidden.csv", index=False, float_format="%.10g")
    spec = cohort.spec
    has_group = len(spec.categorical_levels) > 1
    cfg = {
        "dataset": "cohort.csv",
        "schema": cohort_schema(spec).to_dict(),
        "seed": spec.seed,
        "covariates": spec.covariates,
        "samples": [{"name": s.name, "required": list(s.required)} for s in cohort.samples()],
        "outcomes": [
            {"column": "exam_points", "sample": "A"},
            {"column": "passed", "sample": "A"},
            {"column": "retention_points", "sample": "B"},
            {"column": "post_score", "sample": "C"},
        ],
        "balance": {
            "variables": spec.numeric_names + (["group"] if has_group else []),
            "categorical": ["group"] if has_group else [],
        },
        "oracle_ate": oracle_ate(cohort),
    }
    if cohort.video is not None:
        fmt = "%Y-%m-%dT%H:%M:%SZ"
        vc = cohort.video.catalog.assign(due=cohort.video.catalog["due"].dt.strftime(fmt))
        vc.to_csv(out / "video_catalog.csv", index=False)
        ev = cohort.video.events.assign(timestamp=cohort.video.events["timestamp"].dt.strftime(fmt))
        ev.to_csv(out / "video_events.csv", index=False)
        cohort.quiz.catalog.to_csv(out / "quiz_catalog.csv", index=False)
        qa = cohort.quiz.attempts.assign(submitted_at=cohort.quiz.attempts["submitted_at"].dt.strftime(fmt))
        qa.to_csv(out / "quiz_attempts.csv", index=False, float_format="%.10g")
        cohort.clicker.sessions.to_csv(out / "clicker_sessions.csv", index=False)
        cohort.clicker.participation.to_csv(out / "clicker_participation.csv", index=False)
        cfg["usage"] = {
            "video_catalog": "video_catalog.csv",
            "video_events": "video_events.csv",
            "quiz_catalog": "quiz_catalog.csv",
            "quiz_attempts": "quiz_attempts.csv",
            "clicker_sessions": "clicker_sessions.csv",
            "clicker_participation": "clicker_participation.csv",
            "exam_time": cohort.video.exam_time.strftime(fmt),
            "exam_points": "cohort.csv",
        }
    with open(out / "pipeline_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return cfg


# ---------------------------------------------------------------------------
# benchmark


def _naive(cohort, seed):
    from .inference import welch_mean_test

    ds = cohort.dataset
    y, d = ds.outcome("exam_points"), ds.d
    res = welch_mean_test(y[d == 1], y[d == 0])
    se = np.sqrt(y[d == 1].var(ddof=1) / (d == 1).sum() + y[d == 0].var(ddof=1) / (d == 0).sum())
    return res.mean_a - res.mean_b, se


def _ols(cohort, seed):
    from .inference import fit_ols_robust

    cov = [c for c in cohort.covariates if c not in {i for s in cohort.spec.scales for i in s.items}]
    r = fit_ols_robust(cohort.dataset, "exam_points", cov, cohort.dataset.schema.scales, "ols1")
    return r.theta, r.se


def _dml(model, **cfg):
    def est(cohort, seed):
        from .datamodel import build_design_matrix
        from .dml import DmlConfig, run_dml

        ds = cohort.dataset
        X = build_design_matrix(ds, cohort.covariates).matrix
        c = DmlConfig(model=model, seed=seed, **cfg)
        r = run_dml(ds.outcome("exam_points"), ds.d, X, c)
        return r.theta, r.se

    return est


def _aipw_oracle(cohort, seed):
    from .dml import DmlConfig, run_dml

    ds, h = cohort.dataset, cohort.hidden
    nu = {"g0": h["mu0"], "g1": h["mu1"], "m": h["propensity"]}
    r = run_dml(ds.outcome("exam_points"), ds.d, None, DmlConfig(clip=1e-6), nuisance=nu)
    return r.theta, r.se


def builtin_estimators(folds=5, repetitions=1, cv_folds=10) -> dict:
    return {
        "naive": _naive,
        "ols": _ols,
        "aipw": _dml("interactive", folds=folds, repetitions=repetitions, cv_folds=cv_folds),
        "plr": _dml("partially_linear", folds=folds, repetitions=repetitions, cv_folds=cv_folds),
        "aipw_oracle": _aipw_oracle,
    }


def _bench_one(args):
    spec, seed, estimators = args
    ss = np.random.SeedSequence(seed)
    cohort_seed, est_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    cohort = generate_cohort(replace(spec, seed=cohort_seed))
    truth = oracle_ate(cohort)
    rows = []
    for name, fn in estimators:
        try:
            theta, se = fn(cohort, est_seed)
            rows.append((name, truth, float(theta), float(se), ""))
        except Exception as exc:  # noqa: BLE001 - failures are tallied, not fatal
            rows.append((name, truth, np.nan, np.nan, f"{type(exc).__name__}: {exc}"))
    return rows


def benchmark_draws(spec: CohortSpec, estimators, replications: int, seed=0, n_jobs: int = 1) -> pd.DataFrame:
    """Per-replication estimates, truth and failures (long format)."""
    if replications < 1:
        raise ValueError("replications must be >= 1")
    registry = builtin_estimators()
    ests = []
    for e in estimators:
        if isinstance(e, str):
            if e not in registry:
                raise ValueError(f"unknown estimator {e!r}")
            ests.append((e, registry[e]))
        else:
            ests.append(tuple(e))
    seeds = [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(replications)]
    jobs = [(spec, s, ests) for s in seeds]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_bench_one, jobs))
    else:
        results = [_bench_one(j) for j in jobs]
    rows = [
        {"replication": r, "estimator": name, "truth": t, "estimate": th, "se": se, "error": err}
        for r, res in enumerate(results)
        for name, t, th, se, err in res
    ]
    return pd.DataFrame(rows)


def summarize_draws(draws: pd.DataFrame, level: float = 0.95) -> pd.DataFrame:
    z = stats.norm.ppf(0.5 + level / 2)
    out = []
    for name, g in draws.groupby("estimator", sort=False):
        ok = g["error"] == ""
        est, se, truth = g.loc[ok, "estimate"], g.loc[ok, "se"], g.loc[ok, "truth"]
        err = est - truth
        cover = (np.abs(err) <= z * se).mean() if ok.any() else np.nan
        out.append(
            {
                "estimator": name,
                "replications": len(g),
                "failures": int((~ok).sum()),
                "failure_rate": float((~ok).mean()),
                "mean_estimate": float(est.mean()) if ok.any() else np.nan,
                "bias": float(err.mean()) if ok.any() else np.nan,
                "sd": float(est.std(ddof=1)) if ok.sum() > 1 else np.nan,
                "rmse": float(np.sqrt(np.mean(err**2))) if ok.any() else np.nan,
                "coverage": float(cover),
            }
        )
    return pd.DataFrame(out)


def run_benchmark(spec: CohortSpec, estimators, replications: int, seed=0, n_jobs: int = 1) -> pd.DataFrame:
    """Bias, SD, RMSE and 95% CI coverage per estimator over simulated replications."""
    return summarize_draws(benchmark_draws(spec, estimators, replications, seed, n_jobs))
