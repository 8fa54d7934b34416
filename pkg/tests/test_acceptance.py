"""Acceptance criteria, each checked at its stated size and tolerance.

Every test records one PASS/FAIL line (see the ``verdict`` fixture); the
lines are repeated in the terminal summary.
"""

import filecmp
import json
import time
import warnings

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from flipdml.cli import run
from flipdml.datamodel import build_design_matrix
from flipdml.dml import DmlConfig, run_dml
from flipdml.learners import fit_pcr, fit_ridge
from flipdml.psychometrics import (
    cronbach_alpha,
    fit_unidimensional_cfa,
    mcdonald_omega,
    polychoric_pair,
    retention_criteria,
    standardized_alpha,
)
from flipdml.psychometrics.retention import correlation_eigenvalues
from flipdml.simulator import DEFAULT_THRESHOLDS, CohortSpec, ScaleSpec, discretize, generate_cohort, oracle_ate
from flipdml.usage import (
    ClickerLog,
    QuizLog,
    VideoEventLog,
    assign_quartiles,
    compute_usage_measures,
    quartile_cutoffs,
)


def _seeds(root, k):
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(root).spawn(k)]


def _confounded_spec(n, seed, **kw):
    base = dict(
        n=n,
        numeric_covariates=4,
        scales=[ScaleSpec("s1", [0.7, 0.6, 0.7], treatment_weight=0.2, outcome_weight=0.5),
                ScaleSpec("s2", [0.6, 0.7, 0.8], treatment_weight=-0.2, outcome_weight=0.3)],
        gamma_numeric=[0.6, -0.4, 0.3, 0.0],
        gamma_categorical=[0.4, -0.3],
        beta_numeric=[1.0, -1.0, 0.5, 0.3],
        beta_categorical=[0.5, 0.2],
        tau=0.5,
        seed=seed,
    )
    base.update(kw)
    return CohortSpec(**base)


def _dml_draw(spec, dml_seed, model="interactive", extra=None):
    c = generate_cohort(spec)
    X = build_design_matrix(c.dataset, c.covariates).matrix
    if extra is not None:
        X = np.column_stack([X, extra(c)])
    y, d = c.dataset.outcome("exam_points"), c.dataset.d
    r = run_dml(y, d, X, DmlConfig(model=model, repetitions=1, seed=dml_seed))
    return c, r


# ---------------------------------------------------------------------------
# 1-2 learners


def test_01_ridge_spectral_identity(verdict):
    rng = np.random.default_rng(1)
    lams = np.logspace(-3, 3, 20)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(100):
        X = rng.standard_normal((50, 10)) * rng.uniform(0.5, 3, 10) + rng.normal(0, 2, 10)
        y = X @ rng.standard_normal(10) + rng.standard_normal(50)
        xbar, ybar = X.mean(axis=0), y.mean()
        Xc, yc = X - xbar, y - ybar
        U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
        for lam in lams:
            fit = fit_ridge(X, y, lam, standardize=False)
            spectral = Vt.T @ (s / (s**2 + lam) * (U.T @ yc))
            normal = np.linalg.solve(Xc.T @ Xc + lam * np.eye(10), Xc.T @ yc)
            worst = max(
                worst,
                np.max(np.abs(fit.coef - spectral)),
                np.max(np.abs(fit.coef - normal)),
                abs(fit.intercept - (ybar - xbar @ normal)),
            )
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and elapsed < 5
    verdict(1, "ridge spectral identity", ok, f"max |diff| = {worst:.2e} (tol 1e-8), {elapsed:.2f} s (limit 5 s)")
    assert ok


def test_02_pcr_boundaries(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(100):
        X = rng.standard_normal((50, 10)) + rng.normal(0, 1, 10)
        y = X @ rng.standard_normal(10) + 3 + rng.standard_normal(50)
        A = np.column_stack([np.ones(50), X])
        ols = np.linalg.lstsq(A, y, rcond=None)[0]
        full = fit_pcr(X, y, 10)
        empty = fit_pcr(X, y, 0)
        worst = max(
            worst,
            np.max(np.abs(full.coef - ols[1:])),
            abs(full.intercept - ols[0]),
            np.max(np.abs(empty.coef)),
            abs(empty.intercept - y.mean()),
            np.max(np.abs(empty.predict(X) - y.mean())),
        )
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 1
    verdict(2, "PCR boundary identities", ok, f"max |diff| = {worst:.2e} (tol 1e-10), {elapsed:.2f} s (limit 1 s)")
    assert ok


# ---------------------------------------------------------------------------
# 3-5 DML


def test_03_dml_recovery(verdict):
    reps = 200
    errs, covered = [], []
    t0 = time.perf_counter()
    for s in _seeds(303, reps):
        cs, ds_ = _seeds(s, 2)
        c, r = _dml_draw(_confounded_spec(2000, cs), ds_)
        truth = oracle_ate(c)
        errs.append(r.theta - truth)
        covered.append(r.ci[0] <= truth <= r.ci[1])
    elapsed = time.perf_counter() - t0
    bias, cover = float(np.mean(errs)), float(np.mean(covered))
    ok = abs(bias) < 0.05 and 0.92 <= cover <= 0.98 and elapsed < 600
    verdict(3, "DML recovery", ok,
            f"mean bias {bias:+.4f} (|.| < 0.05), coverage {cover:.3f} (in [0.92, 0.98]), {elapsed:.0f} s (limit 600 s)")
    assert ok


def _true_basis(c):
    x1, x2 = c.raw["x1"].to_numpy(), c.raw["x2"].to_numpy()
    return np.column_stack([x1**2 - 1, np.sin(2 * x2), x1 * x2])


def test_04_double_robustness(verdict):
    # common random numbers: each replication's cohort and fold seed serve all three estimators
    reps = 100
    rows = []
    t0 = time.perf_counter()
    for s in _seeds(404, reps):
        cs, ds_ = _seeds(s, 2)
        spec = _confounded_spec(5000, cs, scales=[], outcome="nonlinear", nonlinear_strength=1.0)
        c, correct = _dml_draw(spec, ds_, extra=_true_basis)
        _, linear = _dml_draw(spec, ds_)
        y, d = c.dataset.outcome("exam_points"), c.dataset.d
        naive = y[d == 1].mean() - y[d == 0].mean()
        truth = oracle_ate(c)
        rows.append((correct.theta - truth, linear.theta - truth, naive - truth))
    elapsed = time.perf_counter() - t0
    b_correct, b_mis, b_naive = np.abs(np.mean(rows, axis=0))
    mcse = np.std(rows, axis=0, ddof=1) / np.sqrt(reps)
    ok = b_mis < 3 * b_correct and b_naive >= 5 * b_mis and elapsed < 600
    verdict(4, "double robustness", ok,
            f"|bias| both-correct {b_correct:.4f}, misspecified outcome {b_mis:.4f} (< 3x both-correct), "
            f"naive {b_naive:.4f} (>= 5x misspecified); MC s.e. {mcse[0]:.4f}/{mcse[1]:.4f}/{mcse[2]:.4f}, "
            f"{elapsed:.0f} s (limit 600 s)")
    assert ok


def test_05_homogeneous_agreement(verdict):
    reps = 200
    agree = []
    for s in _seeds(505, reps):
        cs, ds_ = _seeds(s, 2)
        spec = _confounded_spec(1000, cs, tau=0.5, tau_het=0.0)
        _, irm = _dml_draw(spec, ds_, "interactive")
        _, plr = _dml_draw(spec, ds_, "partially_linear")
        agree.append(abs(irm.theta - plr.theta) <= 2 * np.hypot(irm.se, plr.se))
    share = float(np.mean(agree))
    ok = share >= 0.90
    verdict(5, "interactive vs partially linear agreement", ok, f"{share:.3f} within 2 joint SEs (>= 0.90)")
    assert ok


# ---------------------------------------------------------------------------
# 6-8 psychometrics


def _one_factor(n, loadings, psi, rng):
    lam = np.asarray(loadings, dtype=float)
    F = rng.standard_normal((n, 1))
    return F * lam + rng.standard_normal((n, lam.size)) * np.sqrt(psi)


def test_06_reliability_oracles(verdict):
    rng = np.random.default_rng(6)
    pair = rng.multivariate_normal([0, 0], [[1, 0.5], [0.5, 1]], size=10_000)
    alpha = cronbach_alpha(pair).alpha
    fit = fit_unidimensional_cfa(_one_factor(5000, [0.7] * 3, 0.51, rng), seed=6)
    omega = mcdonald_omega(fit)
    omega_pop = 2.1**2 / (2.1**2 + 3 * 0.51)
    par = _one_factor(10_000, [0.7] * 4, 0.51, rng)
    gap = abs(mcdonald_omega(fit_unidimensional_cfa(par, seed=6)) - standardized_alpha(par))
    ok = abs(alpha - 2 / 3) <= 0.01 and abs(omega - omega_pop) <= 0.02 and gap <= 1e-3
    verdict(6, "reliability oracles", ok,
            f"alpha {alpha:.4f} (0.667 +/- 0.01), omega {omega:.4f} ({omega_pop:.3f} +/- 0.02), "
            f"|omega - std alpha| {gap:.2e} (<= 1e-3)")
    assert ok


def _grid_oracle(x, y):
    """Two-step likelihood maximized over a dense rho grid with scipy's bivariate normal CDF."""
    def cuts(v):
        _, counts = np.unique(v, return_counts=True)
        inner = stats.norm.ppf(np.cumsum(counts)[:-1] / counts.sum())
        return np.concatenate([[-9.0], inner, [9.0]])

    ex, ey = cuts(x), cuts(y)
    _, ix = np.unique(x, return_inverse=True)
    _, iy = np.unique(y, return_inverse=True)
    table = np.zeros((ex.size - 1, ey.size - 1))
    np.add.at(table, (ix, iy), 1)
    corners = np.array([(a, b) for a in ex for b in ey])

    def loglik(rho):
        cov = [[1, rho], [rho, 1]]
        F = stats.multivariate_normal.cdf(corners, [0, 0], cov, abseps=1e-9, releps=1e-9).reshape(ex.size, ey.size)
        P = np.clip(np.diff(np.diff(F, axis=0), axis=1), 1e-300, None)
        return float(np.sum(table * np.log(P)))

    coarse = np.arange(-0.99, 0.991, 0.01)
    best = coarse[np.argmax([loglik(r) for r in coarse])]
    fine = np.arange(best - 0.01, best + 0.01001, 0.0005)
    fine = fine[np.abs(fine) < 0.9995]
    return float(fine[np.argmax([loglik(r) for r in fine])])


def test_07_polychoric_accuracy(verdict):
    rng = np.random.default_rng(7)
    details, ok = [], True
    for rho in (-0.8, 0.0, 0.5, 0.9):
        Z = rng.multivariate_normal([0, 0], [[1, rho], [rho, 1]], size=10_000)
        x, y = discretize(Z[:, 0], DEFAULT_THRESHOLDS), discretize(Z[:, 1], DEFAULT_THRESHOLDS)
        est = polychoric_pair(x, y).rho
        oracle = _grid_oracle(x, y)
        ok &= abs(est - rho) <= 0.03 and abs(est - oracle) <= 0.01
        details.append(f"rho {rho:+.1f}: est {est:+.4f}, grid {oracle:+.4f}")
    verdict(7, "polychoric accuracy", ok, "; ".join(details) + " (truth +/- 0.03, grid +/- 0.01)")
    assert ok


def test_08_retention(verdict):
    fixture = np.array([3.2, 1.6, 1.0, 0.95, 0.71, 0.7, 0.5, 0.3, 0.04])
    rep = retention_criteria(fixture, n=300, pa_iter=10)
    fixed_ok = rep.kgc == 2 and rep.jc == 5

    n, q = 500, 10
    null_zero = 0
    for s in _seeds(808, 100):
        data_seed, pa_seed = _seeds(s, 2)
        Z = np.random.default_rng(data_seed).standard_normal((n, q))
        null_zero += retention_criteria(correlation_eigenvalues(np.corrcoef(Z, rowvar=False)), n, seed=pa_seed).pa == 0

    exact = {}
    for k in (2, 3):
        L = np.zeros((q, k))
        for j in range(q):
            L[j, j % k] = 0.7 + 0.1 * (j % 3) / 2
        hits = 0
        for s in _seeds(880 + k, 100):
            data_seed, pa_seed = _seeds(s, 2)
            r = np.random.default_rng(data_seed)
            X = r.standard_normal((n, k)) @ L.T + r.standard_normal((n, q)) * np.sqrt(1 - np.sum(L**2, axis=1))
            hits += retention_criteria(correlation_eigenvalues(np.corrcoef(X, rowvar=False)), n, seed=pa_seed).pa == k
        exact[k] = hits
    ok = fixed_ok and null_zero >= 95 and all(h >= 90 for h in exact.values())
    verdict(8, "retention criteria", ok,
            f"fixture KGC {rep.kgc}/JC {rep.jc} (2/5), PA null zero in {null_zero}/100 (>= 95), "
            + ", ".join(f"k={k} exact in {h}/100" for k, h in exact.items()) + " (>= 90)")
    assert ok


# ---------------------------------------------------------------------------
# 9 usage


def test_09_usage_measures(verdict):
    exam = "2024-02-01T09:00:00Z"
    cat = pd.DataFrame({"video_id": ["v0", "v1", "v2", "v3"], "n_segments": 10, "due": "2024-01-10T00:00:00Z"})
    qcat = pd.DataFrame({"quiz_id": ["q0", "q1"], "n_questions": 4})
    ccat = pd.DataFrame({"session_id": ["c0", "c1"], "relevant": 5})

    def events(rows):
        return pd.DataFrame(rows, columns=["student_id", "video_id", "segment", "timestamp"])

    def watch(sid, vid, segs, ts="2024-01-05T10:00:00Z"):
        return [(sid, vid, s, ts) for s in segs]

    empty_quiz = QuizLog(qcat, pd.DataFrame(columns=["student_id", "quiz_id", "answered"]))
    empty_clicker = ClickerLog(ccat, pd.DataFrame(columns=["student_id", "session_id", "answered"]))
    # half of one video and all of another, both before the due time: (2/4) * (0.5 + 1) / 2
    hand = compute_usage_measures(
        ["a"], VideoEventLog(cat, events(watch("a", "v0", range(5)) + watch("a", "v1", range(10))), exam),
        empty_quiz, empty_clicker,
    )
    vd = float(hand.loc[0, "VD"])

    rows = (
        watch("a", "v0", range(10)) * 4                           # replays
        + watch("a", "v1", [0, 0, 0, 1])                          # duplicate segments
        + watch("a", "v2", range(10), ts="2024-01-20T00:00:00Z")  # late
        + watch("a", "v3", range(10), ts="2024-03-01T00:00:00Z")  # after the exam
        + watch("b", "v2", range(10))
    )
    quiz = QuizLog(qcat, pd.DataFrame({"student_id": ["a"] * 4, "quiz_id": ["q0", "q0", "q1", "q1"], "answered": [4, 4, 4, 3]}))
    clicker = ClickerLog(ccat, pd.DataFrame({"student_id": ["a"] * 5, "session_id": ["c0"] * 3 + ["c1"] * 2, "answered": 5}))
    adv = compute_usage_measures(["a", "b", "ghost"], VideoEventLog(cat, events(rows), exam), quiz, clicker)
    vals = adv[["VD", "TV", "QP", "ACS"]].to_numpy()
    bounded = bool(np.all((vals >= 0) & (vals <= 1))) and not np.isnan(vals).any()

    r = np.random.default_rng(9)
    pts = np.concatenate([
        r.uniform(2, 19.4, 48), [19.5], r.uniform(19.6, 26.9, 48), [27.0],
        r.uniform(27.1, 35.4, 48), [35.5], r.uniform(35.6, 44, 49),
    ])
    pts = r.permutation(np.round(pts, 1))
    cut = quartile_cutoffs(pts)
    qs = assign_quartiles(pts)
    edges = [-np.inf, 19.5, 27.0, 35.5, np.inf]
    partition = all(np.all((pts[qs == k] > edges[k - 1]) & (pts[qs == k] <= edges[k])) for k in range(1, 5))
    ok = bounded and vd == 0.375 and cut.tolist() == [19.5, 27.0, 35.5] and partition
    verdict(9, "usage measures", ok,
            f"bounded {bounded}, VD {vd!r} (0.375 exact), cutoffs {cut.tolist()} (19.5/27/35.5), partition {partition}")
    assert ok


# ---------------------------------------------------------------------------
# 10 end to end


def _pipeline(root, threads):
    root.mkdir()
    sim_cfg = root / "sim.json"
    sim_cfg.write_text(json.dumps({"seed": 10}))
    assert run(["simulate", "--config", str(sim_cfg), "--out", str(root / "data")]) == 0
    cfg = json.loads((root / "data" / "pipeline_config.json").read_text())
    cfg["dml"] = {"repetitions": 4, "cv_folds": 5}
    (root / "data" / "estimate.json").write_text(json.dumps(cfg))
    est = ["estimate", "--config", str(root / "data" / "estimate.json"), "--out", str(root / "results"), "--threads", str(threads)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert run(est) == 0
    assert run(["report", "--out", str(root / "results")]) == 0


def _same_tree(a, b):
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if files != other:
        return False, ["file sets differ"]
    diff = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    return not diff, diff


def test_10_end_to_end_determinism(verdict, tmp_path):
    for name, threads in (("serial1", 1), ("serial2", 1), ("parallel", 2)):
        _pipeline(tmp_path / name, threads)
    same_runs, d1 = _same_tree(tmp_path / "serial1", tmp_path / "serial2")
    same_par, d2 = _same_tree(tmp_path / "serial1", tmp_path / "parallel")
    n_files = sum(1 for p in (tmp_path / "serial1").rglob("*") if p.is_file())
    ok = same_runs and same_par
    verdict(10, "end-to-end determinism", ok,
            f"{n_files} files; repeat run identical {same_runs} {d1 or ''}, serial vs 2 threads identical {same_par} {d2 or ''}".rstrip())
    assert ok
