"""Conditional imputation: fitting, posteriors, and samplers."""

from .fitting import (
    assign_rows,
    build_resample_table,
    discretized_logistic_logpmf,
    fit_gmm_em,
    fit_kmeans,
    fit_logistics,
    gmm_component_posterior,
    logistic_component_posterior,
)
from .params import (
    SCALE_FLOOR,
    VARIANCE_FLOOR,
    FitReport,
    GmmParams,
    LogisticsParams,
    ResampleTable,
)
from .schemes import (
    DEFAULT_COMPONENTS,
    KINDS,
    MIXTURE_KINDS,
    VALIDATION_KINDS,
    FittedImputer,
    ImputerSpec,
    ImputerStateError,
    constant_imputer,
    fit_imputer,
    impute,
    impute_draws,
    imputer_from_json,
    imputer_to_json,
    load_imputer,
    mask_dependent,
    save_imputer,
)

__all__ = [
    "assign_rows",
    "build_resample_table",
    "discretized_logistic_logpmf",
    "fit_gmm_em",
    "fit_kmeans",
    "fit_logistics",
    "gmm_component_posterior",
    "logistic_component_posterior",
    "SCALE_FLOOR",
    "VARIANCE_FLOOR",
    "FitReport",
    "GmmParams",
    "LogisticsParams",
    "ResampleTable",
    "DEFAULT_COMPONENTS",
    "KINDS",
    "MIXTURE_KINDS",
    "VALIDATION_KINDS",
    "FittedImputer",
    "ImputerSpec",
    "ImputerStateError",
    "constant_imputer",
    "fit_imputer",
    "impute",
    "impute_draws",
    "imputer_from_json",
    "imputer_to_json",
    "load_imputer",
    "mask_dependent",
    "save_imputer",
]
