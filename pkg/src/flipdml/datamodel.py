"""Observation tables, scale definitions, design matrices and analysis samples."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

LIKERT_CODES = frozenset(range(-3, 4))


class SchemaError(ValueError):
    """The schema does not match the data (missing columns, bad roles)."""


class DataValidationError(ValueError):
    """The data violates a domain invariant (treatment coding, Likert range, ids)."""


@dataclass(frozen=True)
class ScaleDefinition:
    name: str
    items: tuple[str, ...]
    reverse: tuple[bool, ...] = ()
    questionnaire: str = "first"

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        rev = tuple(bool(r) for r in self.reverse) if self.reverse else (False,) * len(self.items)
        object.__setattr__(self, "reverse", rev)
        if len(self.items) < 2:
            raise SchemaError(f"scale {self.name!r} needs at least 2 items")
        if len(rev) != len(self.items):
            raise SchemaError(f"scale {self.name!r}: reverse flags do not match items")
        if self.questionnaire not in ("first", "second"):
            raise SchemaError(f"scale {self.name!r}: questionnaire must be 'first' or 'second'")

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleDefinition":
        return cls(
            name=d["name"],
            items=d["items"],
            reverse=d.get("reverse", ()),
            questionnaire=d.get("questionnaire", "first"),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "items": list(self.items),
            "reverse": list(self.reverse),
            "questionnaire": self.questionnaire,
        }


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str = "real"  # "real" or "categorical"
    reference: object = None
    levels: tuple | None = None

    @classmethod
    def from_dict(cls, name: str, d) -> "Covariate":
        if isinstance(d, str):
            return cls(name=name, kind=d)
        levels = d.get("levels")
        return cls(
            name=name,
            kind=d.get("type", "real"),
            reference=d.get("reference"),
            levels=tuple(levels) if levels is not None else None,
        )


@dataclass(frozen=True)
class Schema:
    """Column roles of an observation table."""

    id: str
    treatment: str
    outcomes: tuple[str, ...] = ()
    covariates: tuple[Covariate, ...] = ()
    scales: tuple[ScaleDefinition, ...] = ()

    def __post_init__(self):
        seen = set()
        for s in self.scales:
            shared = seen.intersection(s.items)
            if shared:
                raise SchemaError(f"scale {s.name!r} reuses item column(s) {sorted(shared)}")
            seen.update(s.items)

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        for key in ("id", "treatment"):
            if key not in d:
                raise SchemaError(f"schema is missing required field {key!r}")
        covs = d.get("covariates", {})
        if isinstance(covs, list):
            covs = {c: "real" for c in covs}
        return cls(
            id=d["id"],
            treatment=d["treatment"],
            outcomes=tuple(d.get("outcomes", ())),
            covariates=tuple(Covariate.from_dict(k, v) for k, v in covs.items()),
            scales=tuple(ScaleDefinition.from_dict(s) for s in d.get("scales", ())),
        )

    def to_dict(self) -> dict:
        covs = {}
        for c in self.covariates:
            entry = {"type": c.kind}
            if c.reference is not None:
                entry["reference"] = c.reference
            if c.levels is not None:
                entry["levels"] = list(c.levels)
            covs[c.name] = entry
        return {
            "id": self.id,
            "treatment": self.treatment,
            "outcomes": list(self.outcomes),
            "covariates": covs,
            "scales": [s.to_dict() for s in self.scales],
        }

    @property
    def item_columns(self) -> list[str]:
        return [c for s in self.scales for c in s.items]

    def covariate(self, name: str) -> Covariate:
        for c in self.covariates:
            if c.name == name:
                return c
        if name in self.item_columns:
            return Covariate(name=name, kind="real")
        raise SchemaError(f"{name!r} is not a covariate or item column")

    def scale(self, name: str) -> ScaleDefinition:
        for s in self.scales:
            if s.name == name:
                return s
        raise SchemaError(f"unknown scale {name!r}")


@dataclass(frozen=True)
class Dataset:
    """Validated observation table.

    Item columns are stored polarity-aligned: reverse-coded items have
    already been sign-flipped.  The frame is treated as read-only.
    """

    frame: pd.DataFrame
    schema: Schema

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def d(self) -> np.ndarray:
        return self.frame[self.schema.treatment].to_numpy(dtype=float)

    def outcome(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=float)

    def items(self, scale: str | ScaleDefinition) -> np.ndarray:
        sd = self.schema.scale(scale) if isinstance(scale, str) else scale
        return self.frame[list(sd.items)].to_numpy(dtype=float)

    def cohort_counts(self) -> dict[int, int]:
        counts = self.frame[self.schema.treatment].value_counts()
        return {0: int(counts.get(0, 0)), 1: int(counts.get(1, 0))}


def validate_frame(frame: pd.DataFrame, schema: Schema, *, flip_reverse: bool = True) -> Dataset:
    """Check roles and invariants of a raw table and return a :class:`Dataset`."""
    required = [schema.id, schema.treatment, *schema.outcomes]
    required += [c.name for c in schema.covariates]
    required += schema.item_columns
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing columns: {', '.join(missing)}")

    items = schema.item_columns
    if len(set(items)) != len(items):
        raise SchemaError("item columns overlap across scales")

    ids = frame[schema.id]
    dup = ids[ids.duplicated()]
    if len(dup):
        raise DataValidationError(f"duplicate student id {dup.iloc[0]!r}")

    d = frame[schema.treatment]
    if d.isna().any() or not set(pd.unique(d)) <= {0, 1}:
        raise DataValidationError(f"treatment column {schema.treatment!r} must be coded 0/1")
    if d.nunique() < 2:
        raise DataValidationError("treatment column needs both cohorts present")

    frame = frame.copy()
    frame[schema.treatment] = d.astype(int)
    for col in items:
        vals = pd.to_numeric(frame[col], errors="coerce")
        bad = frame[col].notna() & ~vals.isin(LIKERT_CODES)
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataValidationError(
                f"row {row} (id {frame[schema.id].iloc[row]!r}): item {col!r} has "
                f"value {frame[col].iloc[row]} outside -3..3"
            )
        frame[col] = vals
    if flip_reverse:
        for s in schema.scales:
            for col, rev in zip(s.items, s.reverse):
                if rev:
                    frame[col] = -frame[col]
    frame = frame.reset_index(drop=True)
    return Dataset(frame=frame, schema=schema)


def load_schema(path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    return Schema.from_dict(cfg.get("schema", cfg))


def load_dataset(path, schema: Schema | dict) -> Dataset:
    """Read a UTF-8 CSV with a header row and validate it against ``schema``."""
    if isinstance(schema, dict):
        schema = Schema.from_dict(schema)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    frame = pd.read_csv(path, encoding="utf-8")
    return validate_frame(frame, schema)


# ---------------------------------------------------------------------------
# design matrices


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    columns: tuple[str, ...]
    encoding: dict = field(default_factory=dict)
    standardized: bool = False
    center: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)

    @property
    def shape(self):
        return self.matrix.shape

    def decode(self) -> pd.DataFrame:
        """Recover the original categorical values from the dummy columns."""
        m = self.matrix
        if self.standardized:
            m = m * self.scale + self.center
        out = {}
        for var, enc in self.encoding.items():
            idx = [self.columns.index(c) for c in enc["columns"]]
            block = np.rint(m[:, idx]).astype(int)
            values = np.array([enc["reference"]] * m.shape[0], dtype=object)
            for j, level in enumerate(enc["levels"][1:]):
                values[block[:, j] == 1] = level
            out[var] = values
        return pd.DataFrame(out)


def _levels(series: pd.Series, cov: Covariate) -> list:
    observed = list(pd.unique(series.dropna()))
    if cov.levels is not None:
        levels = list(cov.levels)
        unknown = [v for v in observed if v not in levels]
        if unknown:
            raise DataValidationError(f"{cov.name!r} has undeclared levels {unknown}")
    else:
        levels = sorted(observed, key=lambda v: (str(type(v)), v))
    ref = cov.reference if cov.reference is not None else levels[0]
    if ref not in levels:
        # references read from JSON are strings; data levels may be numbers
        matches = [v for v in levels if str(v) == str(ref)]
        if not matches:
            raise SchemaError(f"reference level {ref!r} not found for {cov.name!r}")
        ref = matches[0]
    return [ref] + [v for v in levels if v != ref]


def build_design_matrix(ds: Dataset, covariates, standardize: bool = False) -> DesignMatrix:
    """Expand covariates into a numeric matrix.

    Categorical variables are dummy-coded against their reference level
    (first declared level, or the schema's ``reference``).  Column order is
    the input order, with dummies in level order.  With ``standardize`` every
    column is centered and scaled to unit sample variance.
    """
    frame = ds.frame
    cols, blocks, encoding = [], [], {}
    for name in covariates:
        if name not in frame.columns:
            raise SchemaError(f"unknown covariate column {name!r}")
        cov = ds.schema.covariate(name)
        if cov.kind == "categorical":
            levels = _levels(frame[name], cov)
            names = [f"{name}[{lvl}]" for lvl in levels[1:]]
            vals = frame[name].to_numpy(dtype=object)
            for lvl, cname in zip(levels[1:], names):
                blocks.append((vals == lvl).astype(float))
                cols.append(cname)
            encoding[name] = {"reference": levels[0], "levels": levels, "columns": names}
        else:
            blocks.append(frame[name].to_numpy(dtype=float))
            cols.append(name)
    X = np.column_stack(blocks) if blocks else np.empty((len(frame), 0))
    if np.isnan(X).any():
        bad = [c for c, col in zip(cols, X.T) if np.isnan(col).any()]
        raise DataValidationError(f"missing values in covariates: {', '.join(bad)}")
    center = scale = None
    if standardize:
        center = X.mean(axis=0)
        scale = X.std(axis=0, ddof=1)
        const = [c for c, s in zip(cols, scale) if not s > 0]
        if const:
            raise DataValidationError(f"cannot standardize constant column {const[0]!r}")
        X = (X - center) / scale
    return DesignMatrix(
        matrix=X,
        columns=tuple(cols),
        encoding=encoding,
        standardized=standardize,
        center=center,
        scale=scale,
    )


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class SampleSpec:
    name: str
    required: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "required", tuple(self.required))


def select_sample(ds: Dataset, spec: SampleSpec) -> Dataset:
    """Keep the rows where every required outcome is observed (listwise exclusion)."""
    missing = [c for c in spec.required if c not in ds.frame.columns]
    if missing:
        raise SchemaError(f"sample {spec.name}: unknown columns {missing}")
    keep = ds.frame[list(spec.required)].notna().all(axis=1) if spec.required else None
    frame = ds.frame if keep is None else ds.frame.loc[keep]
    if frame.empty:
        raise DataValidationError(f"sample {spec.name} is empty")
    if frame[ds.schema.treatment].nunique() < 2:
        raise DataValidationError(f"sample {spec.name} contains a single cohort")
    return Dataset(frame=frame.reset_index(drop=True), schema=ds.schema)
