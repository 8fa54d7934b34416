import numpy as np
import pandas as pd
import pytest

from flipdml.datamodel import Schema, validate_frame

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print(line)
        request.config.stash[ACCEPTANCE].append(line)
        return passed

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_schema():
    return Schema.from_dict(
        {
            "id": "sid",
            "treatment": "flipped",
            "outcomes": ["exam", "retention"],
            "covariates": {
                "age": {"type": "real"},
                "track": {"type": "categorical", "reference": "bsc", "levels": ["bsc", "msc", "other"]},
            },
            "scales": [
                {"name": "interest", "items": ["int1", "int2", "int3"], "reverse": [False, False, True]},
                {"name": "effort", "items": ["eff1", "eff2"], "questionnaire": "second"},
            ],
        }
    )


@pytest.fixture
def small_frame(rng):
    n = 40
    return pd.DataFrame(
        {
            "sid": [f"s{i:03d}" for i in range(n)],
            "flipped": np.tile([0, 1], n // 2),
            "exam": rng.normal(25, 5, n),
            "retention": np.where(np.arange(n) % 5 == 0, np.nan, rng.normal(3, 1, n)),
            "age": rng.normal(21, 2, n),
            "track": np.array(["bsc", "msc", "other", "bsc"] * (n // 4)),
            "int1": rng.integers(-3, 4, n),
            "int2": rng.integers(-3, 4, n),
            "int3": rng.integers(-3, 4, n),
            "eff1": rng.integers(-3, 4, n),
            "eff2": rng.integers(-3, 4, n),
        }
    )


@pytest.fixture
def small_dataset(small_frame, small_schema):
    return validate_frame(small_frame, small_schema)


def one_factor_block(n, loadings, rng, thresholds=None):
    """Continuous (or discretized) one-factor item responses with unit total variance."""
    lam = np.asarray(loadings, dtype=float)
    f = rng.standard_normal(n)
    Z = f[:, None] * lam + rng.standard_normal((n, lam.size)) * np.sqrt(1 - lam**2)
    if thresholds is None:
        return Z
    return np.searchsorted(np.asarray(thresholds), Z, side="right") - 3
