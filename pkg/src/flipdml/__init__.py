"""Treatment-effect estimation and scale diagnostics for cohort comparisons
of course formats."""

from .datamodel import (
    DataValidationError,
    Dataset,
    SampleSpec,
    Schema,
    ScaleDefinition,
    SchemaError,
    build_design_matrix,
    load_dataset,
    select_sample,
    validate_frame,
)
from .dml import AteEstimate, DmlConfig, OverlapError, run_dml
from .inference import EstimationError, fit_ols_robust, ols_robust
from .learners import cross_validate, fit_logistic_ridge, fit_pcr, fit_ridge

__version__ = "0.1.0"

__all__ = [
    "AteEstimate",
    "DataValidationError",
    "Dataset",
    "DmlConfig",
    "EstimationError",
    "OverlapError",
    "SampleSpec",
    "ScaleDefinition",
    "Schema",
    "SchemaError",
    "build_design_matrix",
    "cross_validate",
    "fit_logistic_ridge",
    "fit_ols_robust",
    "fit_pcr",
    "fit_ridge",
    "load_dataset",
    "ols_robust",
    "run_dml",
    "select_sample",
    "validate_frame",
]
