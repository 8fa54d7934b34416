"""Batch pipeline runner.

Every analysis stage is a subcommand sharing one JSON config::

    flipdml estimate --config pipeline_config.json --seed 7 --out results/

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 estimation failure.  Every run writes ``manifest_<subcommand>.json`` with
the config hash, seed, library versions and output checksums.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .datamodel import (
    DataValidationError,
    SampleSpec,
    Schema,
    SchemaError,
    build_design_matrix,
    load_dataset,
    select_sample,
)
from .dml import DmlConfig, run_dml
from .inference import EstimationError, balance_table, fit_ols_robust
from .learners import LogisticRidgeLearner, RidgeLearner
from .psychometrics import (
    IdentificationError,
    apply_item_selection,
    pca_diagnostics,
    run_item_analysis,
    score_scale_means,
)

OUT_ENV = "FLIPDML_OUT"
FLOAT_FMT = "%.10g"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid or incomplete pipeline configuration; the message names the field."""


def stars(p) -> str:
    if p is None or not np.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    dataset: str | None = None
    schema: dict | None = None
    seed: int | None = None
    covariates: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)
    balance: dict = field(default_factory=dict)
    dml: dict = field(default_factory=dict)
    ols: dict = field(default_factory=dict)
    item_analysis: dict = field(default_factory=dict)
    pca: dict = field(default_factory=dict)
    usage: dict | None = None
    simulate: dict = field(default_factory=dict)
    benchmark: dict = field(default_factory=dict)
    output_dir: str | None = None
    oracle_ate: float | None = None  # informational, written by `simulate`
    base_dir: Path = Path(".")

    DML_KEYS = ("folds", "repetitions", "cv_folds", "clip", "tune_per_fold", "lambdas")
    OLS_KEYS = ("variants", "hc", "raw_scales")

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "PipelineConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"config: unknown field(s) {unknown}")
        cfg = cls(**raw, base_dir=Path(base_dir))
        if isinstance(cfg.schema, str):
            p = cfg.path(cfg.schema)
            if not p.exists():
                raise ConfigError(f"schema: file not found: {p}")
            with open(p, encoding="utf-8") as fh:
                s = json.load(fh)
            cfg.schema = s.get("schema", s)
        if cfg.seed is not None and not isinstance(cfg.seed, int):
            raise ConfigError("seed: must be an integer")
        bad = sorted(set(cfg.dml) - set(cls.DML_KEYS))
        if bad:
            raise ConfigError(f"dml: unknown setting(s) {bad}")
        bad = sorted(set(cfg.ols) - set(cls.OLS_KEYS))
        if bad:
            raise ConfigError(f"ols: unknown setting(s) {bad}")
        for o in cfg.outcomes:
            if not isinstance(o, dict) or "column" not in o:
                raise ConfigError("outcomes: each entry needs a 'column'")
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config: file not found: {path}")
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, path.parent)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def require(self, name: str):
        val = getattr(self, name)
        if val is None or val == [] or val == {}:
            raise ConfigError(f"{name}: required for this subcommand")
        return val

    def dml_config(self, seed: int, n_jobs: int) -> DmlConfig:
        s = {k: v for k, v in self.dml.items() if k != "lambdas"}
        try:
            return DmlConfig(seed=seed, n_jobs=n_jobs, **s)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dml: {exc}") from exc

    def dml_settings(self) -> dict:
        d = DmlConfig()
        out = {"folds": d.folds, "repetitions": d.repetitions, "cv_folds": d.cv_folds, "clip": d.clip}
        out.update(self.dml)
        return out


def _schema(cfg: PipelineConfig) -> Schema:
    try:
        return Schema.from_dict(cfg.require("schema"))
    except SchemaError as exc:
        raise ConfigError(f"schema: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"schema: {exc}") from exc


def _dataset(cfg: PipelineConfig):
    path = cfg.path(cfg.require("dataset"))
    if not path.exists():
        raise ConfigError(f"dataset: file not found: {path}")
    return load_dataset(path, _schema(cfg))


def _seed(cfg: PipelineConfig, stage: str) -> int:
    if cfg.seed is None:
        raise ConfigError(f"seed: required for the stochastic stage {stage!r} (config or --seed)")
    return cfg.seed


def _child_seeds(seed: int, k: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(k)]


# ---------------------------------------------------------------------------
# output


class Writer:
    def __init__(self, out: Path, fmt: str):
        self.out = out
        self.fmt = fmt
        self.files: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def table(self, name: str, df: pd.DataFrame, title: str | None = None):
        p = self.out / f"{name}.csv"
        df.to_csv(p, index=False, float_format=FLOAT_FMT, lineterminator="\n")
        self.files.append(p)
        if self.fmt == "md":
            self.markdown(name, [(title or name, df)])

    def markdown(self, name: str, sections):
        p = self.out / f"{name}.md"
        parts = []
        for title, df in sections:
            parts.append(f"## {title}\n\n{markdown_table(df)}\n")
        p.write_text("\n".join(parts), encoding="utf-8")
        self.files.append(p)

    def json(self, name: str, obj):
        p = self.out / name
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
        self.files.append(p)


def markdown_table(df: pd.DataFrame) -> str:
    return df.to_markdown(index=False, floatfmt=".3f")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def config_hash(cfg: PipelineConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(w: Writer, sub: str, cfg: PipelineConfig, extra: dict | None = None):
    outputs = {p.name: _sha256(p) for p in sorted(set(w.files))}
    manifest = {
        "subcommand": sub,
        "config_sha256": config_hash(cfg),
        "seed": cfg.seed,
        "versions": {
            "flipdml": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "outputs": outputs,
    }
    manifest.update(extra or {})
    w.json(f"manifest_{sub}.json", manifest)


# ---------------------------------------------------------------------------
# subcommands


def cmd_item_analysis(cfg: PipelineConfig, w: Writer, threads: int) -> dict:
    ds = _dataset(cfg)
    opts = cfg.item_analysis
    thr = dict(item_total_min=opts.get("item_total_min", 0.3), loading_min=opts.get("loading_min", 0.4))
    drops = opts.get("wording_drops", {})
    seed = cfg.seed if cfg.seed is not None else 0
    item_rows, scale_rows = [], []
    for sd in ds.schema.scales:
        rep = run_item_analysis(ds.items(sd), sd.items, seed=seed, **thr)
        sel = apply_item_selection(rep, drops.get(sd.name, ()), seed=seed)
        frame = rep.item_frame()
        frame.insert(0, "scale", sd.name)
        frame["retained"] = frame["item"].isin(sel.retained)
        item_rows.append(frame)
        summ = rep.summary()
        scale_rows.append(
            {
                "scale": sd.name,
                **summ,
                "omega_reduced": sel.omega_end,
                "dropped": " ".join(f"{i}({why})" for i, why, _ in sel.dropped),
                "retained": " ".join(sel.retained),
                "notes": " | ".join(rep.notes),
            }
        )
    scales = pd.DataFrame(scale_rows)
    items = pd.concat(item_rows, ignore_index=True)
    w.table("item_analysis_scales", scales, "Scale reliability")
    w.table("item_analysis_items", items, "Item statistics")
    return {"item_analysis": thr}


def cmd_pca_diagnostics(cfg: PipelineConfig, w: Writer, threads: int) -> dict:
    ds = _dataset(cfg)
    seed = _seed(cfg, "pca-diagnostics")
    pa_iter = int(cfg.pca.get("pa_iter", 1000))
    pct = float(cfg.pca.get("percentile", 95.0))
    rows, scree = [], []
    for sd, s in zip(ds.schema.scales, _child_seeds(seed, len(ds.schema.scales))):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = pca_diagnostics(ds.items(sd), pa_iter=pa_iter, pa_percentile=pct, seed=s)
        a = rep.adequacy
        rows.append(
            {
                "scale": sd.name,
                "q": len(sd.items),
                "kmo": a.kmo,
                "bartlett_chi2": a.bartlett_chi2,
                "bartlett_df": a.bartlett_df,
                "bartlett_p": a.bartlett_p,
                "determinant": a.determinant,
                **rep.counts(),
                "notes": " | ".join(rep.notes),
            }
        )
        sc = rep.scree()
        sc.insert(0, "scale", sd.name)
        scree.append(sc)
    w.table("pca_diagnostics", pd.DataFrame(rows), "Sampling adequacy and retention")
    w.table("scree", pd.concat(scree, ignore_index=True), "Scree data")
    return {"pca": {"pa_iter": pa_iter, "percentile": pct}}


def cmd_score(cfg: PipelineConfig, w: Writer, threads: int) -> dict:
    ds = _dataset(cfg)
    out = pd.DataFrame({ds.schema.id: ds.frame[ds.schema.id].to_numpy()})
    for sd in ds.schema.scales:
        out[sd.name] = score_scale_means(ds.items(sd))
    w.table("scale_scores", out, "Scale means")
    return {}


def _learners(cfg: PipelineConfig):
    lams = cfg.dml.get("lambdas")
    if lams is None:
        return {}
    cv = int(cfg.dml.get("cv_folds", 10))
    return {"outcome": RidgeLearner(cv_folds=cv, lambdas=tuple(lams)),
            "propensity": LogisticRidgeLearner(cv_folds=cv, lambdas=tuple(lams))}


def cmd_estimate(cfg: PipelineConfig, w: Writer, threads: int) -> dict:
    ds = _dataset(cfg)
    seed = _seed(cfg, "estimate")
    outcomes = cfg.require("outcomes")
    covs = cfg.require("covariates")
    items = set(ds.schema.item_columns)
    base = [c for c in covs if c not in items]
    samples = {s["name"]: SampleSpec(s["name"], tuple(s.get("required", ()))) for s in cfg.samples}
    variants = cfg.ols.get("variants", ["ols1", "ols2", "ols3"])
    hc = cfg.ols.get("hc", "HC1")
    raw = tuple(cfg.ols.get("raw_scales", ("repetition",)))
    learners = _learners(cfg)
    rows = []
    for o, s in zip(outcomes, _child_seeds(seed, len(outcomes))):
        col = o["column"]
        sname = o.get("sample")
        if sname is not None and sname not in samples:
            raise ConfigError(f"outcomes: sample {sname!r} is not defined in 'samples'")
        spec = samples.get(sname, SampleSpec(sname or "all", (col,)))
        sub = select_sample(ds, spec)
        for v in variants:
            r = fit_ols_robust(sub, col, base, ds.schema.scales, v, hc=hc, raw_scales=raw)
            rows.append(_est_row(col, spec.name, v, r.theta, r.se, r.p_value, r.ci, len(sub.frame)))
        X = build_design_matrix(sub, covs).matrix
        y = sub.outcome(col)
        for label, model in (("dml_interactive", "interactive"), ("dml_partially_linear", "partially_linear")):
            dcfg = cfg.dml_config(s, threads)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                r = run_dml(y, sub.d, X, replace(dcfg, model=model),
                            outcome_learner=learners.get("outcome"), propensity_learner=learners.get("propensity"))
            rows.append(_est_row(col, spec.name, label, r.theta, r.se, r.p_value, r.ci, r.n))
    df = pd.DataFrame(rows)
    w.table("estimate", df, "Treatment effect estimates (p<0.1 *, p<0.05 **, p<0.01 ***)")
    return {"dml": cfg.dml_settings(), "ols": {"variants": list(variants), "hc": hc, "raw_scales": list(raw)}}


def _est_row(outcome, sample, estimator, theta, se, p, ci, n):
    return {
        "outcome": outcome,
        "sample": sample,
        "estimator": estimator,
        "n": int(n),
        "theta": float(theta),
        "se": float(se),
        "p_value": float(p),
        "ci_lo": float(ci[0]),
        "ci_hi": float(ci[1]),
        "stars": stars(p),
    }


def cmd_balance(cfg: PipelineConfig, w: Writer, threads: int) -> dict:
    ds = _dataset(cfg)
    b = cfg.require("balance")
    variables = b.get("variables")
    if not variables:
        raise ConfigError("balance.variables: required")
    missing = [v for v in variables if v not in ds.frame.columns]
    if missing:
        raise ConfigError(f"balance.variables: unknown columns {missing}")
    tab = balance_table(ds, variables, tuple(b.get("categorical", ())))
    tab["stars"] = [stars(p) for p in tab["p_value"]]
    w.table("balance", tab, "Cohort comparison")
    return {}


def cmd_usage(cfg: PipelineConfig, w: Writer, threads: int) -> dict:
    from .usage import access_vs_usage, compute_usage_measures, quartile_summary, read_usage_logs

    u = cfg.require("usage")
    for key in ("video_catalog", "video_events", "quiz_catalog", "quiz_attempts",
                "clicker_sessions", "clicker_participation", "exam_time"):
        if key not in u:
            raise ConfigError(f"usage.{key}: required")
        if key != "exam_time" and not cfg.path(u[key]).exists():
            raise ConfigError(f"usage.{key}: file not found: {cfg.path(u[key])}")
    ds = _dataset(cfg)
    video, quiz, clicker = read_usage_logs(u, cfg.base_dir)
    pts_col = u.get("points_column", "exam_points")
    treated = ds.frame.loc[ds.d == 1, [ds.schema.id, pts_col]].dropna()
    treated = treated.rename(columns={ds.schema.id: "student_id"})
    measures = compute_usage_measures(treated["student_id"], video, quiz, clicker)
    merged = measures.merge(treated, on="student_id", how="left")
    cut = u.get("quartile_cutoffs")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        summary = quartile_summary(merged, pts_col, cut)
    series, cors = access_vs_usage(treated["student_id"], video)
    w.table("usage_measures", merged, "Usage measures per student")
    w.table("usage_quartiles", summary, "Usage by exam-point quartile")
    w.table("usage_access", series, "Video access against usage")
    return {"usage": {"access_correlations": cors}}


def _cohort_spec(cfg: PipelineConfig):
    from .simulator import CohortSpec, default_cohort_spec

    sim = dict(cfg.simulate)
    try:
        if "spec" in sim:
            spec = CohortSpec.from_dict(sim["spec"])
        else:
            spec = default_cohort_spec(**sim.get("overrides", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"simulate: {exc}") from exc
    return spec


def cmd_simulate(cfg: PipelineConfig, w: Writer, threads: int) -> dict:
    from .simulator import export_cohort, generate_cohort

    seed = _seed(cfg, "simulate")
    spec = replace(_cohort_spec(cfg), seed=seed)
    cohort = generate_cohort(spec)
    exported = export_cohort(cohort, w.out)
    for name in ("cohort.csv", "cohort_hidden.csv", "pipeline_config.json"):
        w.files.append(w.out / name)
    for v in exported.get("usage", {}).values():
        p = w.out / str(v)
        if p.exists():
            w.files.append(p)
    return {"simulate": {"n": spec.n, "scales": len(spec.scales)}}


def cmd_benchmark(cfg: PipelineConfig, w: Writer, threads: int) -> dict:
    from .simulator import benchmark_draws, builtin_estimators, summarize_draws

    seed = _seed(cfg, "benchmark")
    b = cfg.benchmark
    reps = int(b.get("replications", 100))
    names = b.get("estimators", ["naive", "ols", "aipw", "plr", "aipw_oracle"])
    dml = cfg.dml_settings()
    reg = builtin_estimators(folds=dml["folds"], repetitions=int(b.get("dml_repetitions", 1)), cv_folds=dml["cv_folds"])
    unknown = [n for n in names if n not in reg]
    if unknown:
        raise ConfigError(f"benchmark.estimators: unknown {unknown}")
    spec = _cohort_spec(cfg)
    if "n" in b:
        spec = replace(spec, n=int(b["n"]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        draws = benchmark_draws(spec, [(n, reg[n]) for n in names], reps, seed, threads)
    w.table("benchmark_draws", draws, "Benchmark draws")
    w.table("benchmark_summary", summarize_draws(draws), "Benchmark summary")
    return {"benchmark": {"replications": reps, "estimators": names}}


REPORT_TABLES = (
    ("balance", "Cohort comparison"),
    ("item_analysis_scales", "Scale reliability"),
    ("pca_diagnostics", "Sampling adequacy and retention"),
    ("estimate", "Treatment effect estimates (p<0.1 *, p<0.05 **, p<0.01 ***)"),
    ("usage_quartiles", "Usage by exam-point quartile"),
    ("benchmark_summary", "Benchmark summary"),
)


def cmd_report(cfg: PipelineConfig, w: Writer, threads: int) -> dict:
    sections = []
    for name, title in REPORT_TABLES:
        p = w.out / f"{name}.csv"
        if p.exists():
            sections.append((title, pd.read_csv(p, keep_default_na=False)))
    if not sections:
        raise ConfigError(f"out: no stage outputs found in {w.out}")
    w.markdown("report", sections)
    return {"report": [t for t, _ in sections]}


COMMANDS = {
    "item-analysis": cmd_item_analysis,
    "pca-diagnostics": cmd_pca_diagnostics,
    "score": cmd_score,
    "estimate": cmd_estimate,
    "balance": cmd_balance,
    "usage": cmd_usage,
    "simulate": cmd_simulate,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flipdml", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=COMMANDS[name].__name__[4:].replace("_", " "))
        sp.add_argument("--config", help="pipeline config JSON")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}, config output_dir, or ./out)")
        sp.add_argument("--threads", type=int, default=1, help="worker processes (default 1)")
        sp.add_argument("--format", choices=("csv", "md"), default="csv", help="md also writes markdown tables")
    return parser


def _out_dir(args, cfg: PipelineConfig) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg.output_dir:
        return cfg.path(cfg.output_dir)
    return Path("out")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = PipelineConfig.load(args.config)
        elif args.command == "report":
            cfg = PipelineConfig()
        else:
            raise ConfigError("--config: required for this subcommand")
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        w = Writer(_out_dir(args, cfg), args.format)
        extra = COMMANDS[args.command](cfg, w, args.threads)
        write_manifest(w, args.command, cfg, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, DataValidationError) as exc:
        print(f"data validation error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, IdentificationError, np.linalg.LinAlgError) as exc:
        print(f"estimation failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
