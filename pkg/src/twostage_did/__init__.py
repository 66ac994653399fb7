"""Two-stage difference-in-differences estimation for staggered panels.

Fit unit and period effects on untreated observations only, adjust all
outcomes, and regress the adjusted outcomes on treatment indicators:
the resulting static and event-study estimates are robust to
heterogeneous, dynamic treatment effects that bias the conventional
one-step two-way fixed-effects regression. Inference accounts for the
estimated first stage through a corrected clustered sandwich or a
cluster bootstrap; diagnostics expose the naive regression's implicit
(possibly negative) cell weights; a simulator generates staggered
panels with known ground truth.
"""

from . import errors
from .dgp import DEFAULT_GROUPS, DgpConfig, DgpTruth, GroupSpec, simulate
from .estimator import (
    EstimateResult,
    SecondStageSpec,
    WeightCell,
    WeightDecomposition,
    compute_twfe_weights,
    estimate_imputation,
    estimate_twfe,
    estimate_two_stage,
    panel_fe_spec,
    second_stage_design,
)
from .fe import (
    DenseOlsFit,
    FeSpec,
    FirstStageFit,
    SparseDesign,
    demean_columns,
    dense_ols,
    fit_fixed_effects,
    predict,
    sparse_design,
)
from .inference import (
    BootstrapResult,
    InferenceSpec,
    VcovComponents,
    bootstrap_vcov,
    gmm_vcov,
    gmm_vcov_components,
)
from .panel import (
    NEVER_TREATED,
    ColumnSpec,
    Observation,
    PanelDataset,
    build_dataset,
    derive_event_time,
    load_csv,
    untreated_mask,
    write_csv,
)

__version__ = "0.1.0"

__all__ = [
    "BootstrapResult",
    "ColumnSpec",
    "DEFAULT_GROUPS",
    "DenseOlsFit",
    "DgpConfig",
    "DgpTruth",
    "EstimateResult",
    "FeSpec",
    "FirstStageFit",
    "GroupSpec",
    "InferenceSpec",
    "NEVER_TREATED",
    "Observation",
    "PanelDataset",
    "SecondStageSpec",
    "SparseDesign",
    "VcovComponents",
    "WeightCell",
    "WeightDecomposition",
    "bootstrap_vcov",
    "build_dataset",
    "compute_twfe_weights",
    "demean_columns",
    "dense_ols",
    "derive_event_time",
    "errors",
    "estimate_imputation",
    "estimate_twfe",
    "estimate_two_stage",
    "fit_fixed_effects",
    "gmm_vcov",
    "gmm_vcov_components",
    "load_csv",
    "panel_fe_spec",
    "predict",
    "second_stage_design",
    "simulate",
    "sparse_design",
    "untreated_mask",
    "write_csv",
]
