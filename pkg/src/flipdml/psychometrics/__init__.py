"""Scale construction and diagnostics for Likert item blocks."""

from .cfa import (
    CfaFit,
    IdentificationError,
    TauEquivalenceTest,
    compare_tau_equivalence,
    fit_unidimensional_cfa,
    mcdonald_omega,
    omega_from_parameters,
)
from .items import ItemAnalysisReport, SelectionResult, apply_item_selection, run_item_analysis
from .polychoric import PolychoricResult, bvn_cdf, polychoric_matrix, polychoric_pair
from .reliability import (
    AlphaResult,
    cronbach_alpha,
    item_total_correlations,
    score_scale_means,
    standardized_alpha,
)
from .retention import (
    AdequacyResult,
    RetentionReport,
    ekc_reference,
    parallel_analysis_reference,
    pca_diagnostics,
    retention_criteria,
    sampling_adequacy,
)

__all__ = [
    "AdequacyResult",
    "AlphaResult",
    "CfaFit",
    "IdentificationError",
    "ItemAnalysisReport",
    "PolychoricResult",
    "RetentionReport",
    "SelectionResult",
    "TauEquivalenceTest",
    "apply_item_selection",
    "bvn_cdf",
    "compare_tau_equivalence",
    "cronbach_alpha",
    "ekc_reference",
    "fit_unidimensional_cfa",
    "item_total_correlations",
    "mcdonald_omega",
    "omega_from_parameters",
    "parallel_analysis_reference",
    "pca_diagnostics",
    "polychoric_matrix",
    "polychoric_pair",
    "retention_criteria",
    "run_item_analysis",
    "sampling_adequacy",
    "score_scale_means",
    "standardized_alpha",
]
