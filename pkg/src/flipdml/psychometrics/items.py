"""Item analysis and omega-driven item selection for one scale."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .cfa import (
    CfaFit,
    TauEquivalenceTest,
    compare_tau_equivalence,
    fit_unidimensional_cfa,
    mcdonald_omega,
)
from .reliability import AlphaResult, as_block, cronbach_alpha, item_total_correlations

ITEM_TOTAL_MIN = 0.3
LOADING_MIN = 0.4


@dataclass
class ItemAnalysisReport:
    """Reliability and fit summary of a single scale.

    ``flags`` maps each item name to the list of criteria it fails
    (``"item_total"``, ``"loading"``); an empty list means no flag.
    """

    items: list
    alpha: AlphaResult
    omega: float
    item_total: np.ndarray
    loadings: np.ndarray
    srmr: float
    tau_test: TauEquivalenceTest | None
    flags: dict
    fit: CfaFit
    block: np.ndarray = field(repr=False)
    thresholds: tuple = (ITEM_TOTAL_MIN, LOADING_MIN)
    notes: list = field(default_factory=list)

    @property
    def flag_count(self) -> int:
        return sum(1 for v in self.flags.values() if v)

    @property
    def flagged(self) -> list:
        return [k for k, v in self.flags.items() if v]

    def item_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "item": self.items,
                "item_total": self.item_total,
                "std_loading": self.loadings,
                "flags": [";".join(self.flags[i]) for i in self.items],
            }
        )

    def summary(self) -> dict:
        t = self.tau_test
        return {
            "q": len(self.items),
            "n": self.alpha.n,
            "alpha": self.alpha.alpha,
            "alpha_lo": self.alpha.ci[0],
            "alpha_hi": self.alpha.ci[1],
            "omega": self.omega,
            "srmr": self.srmr,
            "tau_chi2": t.chi2 if t else np.nan,
            "tau_df": t.df if t else np.nan,
            "tau_p": t.p_value if t else np.nan,
            "heywood": self.fit.heywood,
        }


def _omega_fit(B, seed) -> tuple[CfaFit, TauEquivalenceTest | None, list]:
    notes = []
    tau = fit_unidimensional_cfa(B, "tau_equivalent", seed=seed)
    if B.shape[1] < 3:
        notes.append("two items: congeneric model not identified, omega from the tau-equivalent fit")
        return tau, None, notes
    cong = fit_unidimensional_cfa(B, "congeneric", seed=seed)
    return cong, compare_tau_equivalence(cong, tau), notes


def run_item_analysis(
    block,
    items=None,
    item_total_min: float = ITEM_TOTAL_MIN,
    loading_min: float = LOADING_MIN,
    seed: int = 0,
) -> ItemAnalysisReport:
    """Alpha with CI, omega, corrected item-total correlations, congeneric loadings,
    SRMR and the tau-equivalence comparison for one item block.

    Rows with any missing response are dropped (listwise).  Items whose
    corrected item-total correlation is below ``item_total_min`` or whose
    standardized loading is below ``loading_min`` are flagged.
    """
    B = as_block(block)
    B = B[~np.isnan(B).any(axis=1)]
    q = B.shape[1]
    if q < 2:
        raise ValueError("item analysis needs at least two items")
    items = list(items) if items is not None else [f"item{j + 1}" for j in range(q)]
    if len(items) != q:
        raise ValueError("item names do not match block width")
    alpha = cronbach_alpha(B)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        itc = item_total_correlations(B)
    fit, tau_test, notes = _omega_fit(B, seed)
    notes += [str(w.message) for w in caught]
    notes += fit.notes
    flags = {}
    for j, name in enumerate(items):
        f = []
        if not np.isfinite(itc[j]) or itc[j] < item_total_min:
            f.append("item_total")
        if fit.std_loadings[j] < loading_min:
            f.append("loading")
        flags[name] = f
    return ItemAnalysisReport(
        items=items,
        alpha=alpha,
        omega=mcdonald_omega(fit),
        item_total=itc,
        loadings=fit.std_loadings,
        srmr=fit.srmr,
        tau_test=tau_test,
        flags=flags,
        fit=fit,
        block=B,
        thresholds=(item_total_min, loading_min),
        notes=notes,
    )


@dataclass
class SelectionResult:
    retained: list
    dropped: list  # (item, reason, omega after the drop) in drop order
    omega_start: float
    omega_end: float
    report: ItemAnalysisReport


def _subreport(report: ItemAnalysisReport, keep: list, seed: int) -> ItemAnalysisReport:
    idx = [report.items.index(i) for i in keep]
    return run_item_analysis(report.block[:, idx], keep, *report.thresholds, seed=seed)


def apply_item_selection(report: ItemAnalysisReport, wording_drops=(), seed: int = 0) -> SelectionResult:
    """Drop flagged items one at a time while omega improves.

    Items listed in ``wording_drops`` are removed first regardless of
    statistics.  Then, at each step, the flagged item whose removal gives the
    largest omega is dropped if omega increases and the flag count of the
    remaining set does not grow.  Selection never goes below two items.
    """
    unknown = set(wording_drops) - set(report.items)
    if unknown:
        raise KeyError(f"wording overrides name unknown items: {sorted(unknown)}")
    dropped = []
    current = report
    keep = list(report.items)
    for item in wording_drops:
        if len(keep) <= 2:
            warnings.warn("selection stopped: scale would drop below two items", RuntimeWarning, stacklevel=2)
            break
        keep.remove(item)
        current = _subreport(report, keep, seed)
        dropped.append((item, "wording", current.omega))

    while current.flagged:
        if len(keep) <= 2:
            warnings.warn("selection stopped: scale would drop below two items", RuntimeWarning, stacklevel=2)
            break
        best = None
        for item in current.flagged:
            cand = _subreport(report, [i for i in keep if i != item], seed)
            if best is None or cand.omega > best[1].omega:
                best = (item, cand)
        item, cand = best
        if cand.omega <= current.omega or cand.flag_count > current.flag_count:
            break
        keep.remove(item)
        current = cand
        dropped.append((item, "omega", cand.omega))
    return SelectionResult(keep, dropped, report.omega, current.omega, current)
