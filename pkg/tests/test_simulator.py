import json

import numpy as np
import pandas as pd
import pytest

from flipdml.datamodel import load_dataset
from flipdml.simulator import (
    CohortSpec,
    ScaleSpec,
    benchmark_draws,
    discretize,
    export_cohort,
    generate_cohort,
    oracle_ate,
    default_cohort_spec,
    run_benchmark,
    summarize_draws,
)


def _spec(**kw):
    base = dict(n=500, numeric_covariates=3, scales=[ScaleSpec("s", [0.7, 0.7, 0.7])], seed=1)
    base.update(kw)
    return CohortSpec(**base)


class TestSpec:
    def test_thresholds_must_increase(self):
        with pytest.raises(ValueError):
            _spec(thresholds=(-1, -1, 0, 1, 2, 3))

    def test_factor_count_below_items(self):
        with pytest.raises(ValueError):
            _spec(scales=[ScaleSpec("s", [[0.5, 0.5], [0.5, 0.5]])])

    def test_json_round_trip(self):
        s = default_cohort_spec(n=100)
        back = CohortSpec.from_dict(json.loads(json.dumps(s.to_dict())))
        assert back == s

    def test_default_geometry(self):
        s = default_cohort_spec()
        assert len(s.scales) == 14
        assert sum(len(x.items) for x in s.scales) == 67

    def test_empty_category_warning(self):
        with pytest.warns(RuntimeWarning, match="expected-empty"):
            generate_cohort(_spec(n=50, thresholds=(-5, -4.5, -4, 0, 1, 2)))


def test_discretize_codes():
    z = np.array([-10, -1.8, -1.0, 0.0, 10])
    np.testing.assert_array_equal(discretize(z, (-1.8, -1.1, -0.4, 0.3, 1.0, 1.7)), [-3, -2, -1, 0, 3])


class TestGenerate:
    def test_gamma_zero_balanced(self):
        n = 4000
        c = generate_cohort(_spec(n=n, gamma0=0.0, scales=[]))
        share = c.raw["d"].mean()
        assert abs(share - 0.5) < 3 * np.sqrt(0.25 / n)

    def test_tau_zero(self):
        c = generate_cohort(_spec(tau=0.0))
        assert oracle_ate(c) == 0.0
        assert c.hidden["mu1"].mean() - c.hidden["mu0"].mean() == pytest.approx(0.0, abs=1e-12)

    def test_constant_tau_exact(self):
        c = generate_cohort(_spec(tau=0.5))
        assert oracle_ate(c) == pytest.approx(0.5, abs=1e-12)

    def test_heterogeneous_tau_is_mean(self):
        c = generate_cohort(_spec(tau=0.5, tau_het=1.0))
        expected = np.mean(0.5 + c.raw["x1"].to_numpy())
        assert oracle_ate(c) == pytest.approx(expected, abs=1e-12)

    def test_large_n_converges(self):
        c = generate_cohort(_spec(n=50_000, tau=0.5, tau_het=1.0, scales=[], seed=9))
        assert abs(oracle_ate(c) - 0.5) < 0.02

    def test_consistency(self):
        c = generate_cohort(_spec(gamma_numeric=[0.5, -0.3]))
        d = c.raw["d"].to_numpy()
        y = c.raw["exam_points"].to_numpy()
        np.testing.assert_array_equal(y, np.where(d == 1, c.hidden["y1"], c.hidden["y0"]))

    def test_same_seed_identical(self):
        s = default_cohort_spec(n=120, seed=4)
        a, b = generate_cohort(s), generate_cohort(s)
        pd.testing.assert_frame_equal(a.raw, b.raw)
        pd.testing.assert_frame_equal(a.hidden, b.hidden)
        pd.testing.assert_frame_equal(a.video.events, b.video.events)
        pd.testing.assert_frame_equal(a.quiz.attempts, b.quiz.attempts)

    def test_likert_marginals(self):
        n = 20_000
        s = _spec(n=n, scales=[ScaleSpec("s", [0.7, 0.5, 0.3, 0.8])])
        c = generate_cohort(s)
        p = s.category_probabilities()
        band = 3 * np.sqrt(p * (1 - p) / n)
        for col in s.scales[0].items:
            obs = np.array([(c.raw[col] == k).mean() for k in range(-3, 4)])
            assert np.all(np.abs(obs - p) < band), col

    def test_reverse_items_flipped(self):
        s = _spec(scales=[ScaleSpec("s", [0.7, 0.7, 0.7], reverse=[False, False, True])])
        c = generate_cohort(s)
        raw = c.raw[["s_1", "s_3"]].corr().iloc[0, 1]
        assert raw < 0
        # the dataset flips it back
        assert np.corrcoef(c.dataset.frame["s_1"], c.dataset.frame["s_3"])[0, 1] > 0

    def test_propensity_spread_monotone_in_gamma(self):
        widths = []
        for g in (0.0, 0.5, 1.0, 2.0):
            c = generate_cohort(_spec(n=2000, gamma_numeric=[g, g], scales=[], seed=3))
            p = c.hidden["propensity"]
            widths.append(p.max() - p.min())
        assert widths[0] == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.diff(widths) > 0)

    def test_calibrated_overlap_bounds(self):
        c = generate_cohort(_spec(n=5000, gamma_numeric=[0.5, -0.5], scales=[], seed=2))
        p = c.hidden["propensity"]
        assert 0.02 < p.min() and p.max() < 0.98

    def test_dropout_nesting(self):
        c = generate_cohort(default_cohort_spec(seed=2))
        b = c.raw["retention_points"].isna()
        cc = c.raw["post_score"].isna()
        assert (cc | ~b).all()

    def test_usage_logs_present(self):
        c = generate_cohort(default_cohort_spec(n=60, seed=5))
        assert set(c.video.events["student_id"]) <= set(c.raw["student_id"])
        assert (c.video.events["timestamp"] < c.video.exam_time).all()


class TestExport:
    def test_round_trip(self, tmp_path):
        c = generate_cohort(default_cohort_spec(n=80, seed=6))
        cfg = export_cohort(c, tmp_path)
        written = json.loads((tmp_path / "pipeline_config.json").read_text())
        assert written == cfg
        from flipdml.datamodel import Schema

        ds = load_dataset(tmp_path / cfg["dataset"], Schema.from_dict(cfg["schema"]))
        np.testing.assert_allclose(ds.d, c.dataset.d)
        np.testing.assert_allclose(ds.outcome("exam_points"), c.dataset.outcome("exam_points"), rtol=1e-9)
        assert cfg["oracle_ate"] == pytest.approx(oracle_ate(c))
        for key in ("video_events", "quiz_attempts", "clicker_participation"):
            assert (tmp_path / cfg["usage"][key]).exists()


class TestBenchmark:
    def test_zero_replications(self):
        with pytest.raises(ValueError):
            run_benchmark(_spec(), ["naive"], 0)

    def test_unknown_estimator(self):
        with pytest.raises(ValueError):
            run_benchmark(_spec(), ["magic"], 1)

    def test_deterministic(self):
        s = _spec(n=200, gamma_numeric=[0.5])
        a = run_benchmark(s, ["naive", "ols", "aipw_oracle"], 4, seed=11)
        b = run_benchmark(s, ["naive", "ols", "aipw_oracle"], 4, seed=11)
        pd.testing.assert_frame_equal(a, b)

    def test_failure_recorded(self):
        def broken(cohort, seed):
            raise RuntimeError("boom")

        draws = benchmark_draws(_spec(n=100), ["naive", ("broken", broken)], 3, seed=0)
        summary = summarize_draws(draws).set_index("estimator")
        assert summary.loc["broken", "failures"] == 3
        assert summary.loc["broken", "failure_rate"] == 1.0
        assert summary.loc["naive", "failures"] == 0
        assert draws.loc[draws.estimator == "broken", "error"].str.contains("boom").all()

    def test_columns(self):
        t = run_benchmark(_spec(n=150), ["naive"], 3, seed=1)
        assert list(t.columns) == [
            "estimator", "replications", "failures", "failure_rate",
            "mean_estimate", "bias", "sd", "rmse", "coverage",
        ]

    @pytest.mark.slow
    def test_oracle_aipw_and_naive(self):
        s = _spec(n=1000, gamma_numeric=[1.0, -0.5], beta_numeric=[2.0, -1.0, 0.5], scales=[])
        t = run_benchmark(s, ["naive", "aipw_oracle"], 500, seed=7).set_index("estimator")
        assert abs(t.loc["aipw_oracle", "bias"]) < 0.02
        assert 0.92 <= t.loc["aipw_oracle", "coverage"] <= 0.98
        assert abs(t.loc["naive", "bias"]) >= 5 * abs(t.loc["aipw_oracle", "bias"])
