"""Joint hierarchical modelling of species biomass from DNA metabarcoding.

The package fits a two-stage latent-biomass model to multi-species read
counts with spike-in calibration, detection errors, and contamination;
simulates surveys from the same generative process; evaluates
closed-form study-design variances; and summarises posterior draws.
"""

from __future__ import annotations

__version__ = "0.1.0"

from ._backend import BACKEND_NAME
from .datamodel import (
    HyperParams,
    OtuDataset,
    ValidationReport,
    rescale_to_unit_square,
    require_valid,
    validate_dataset,
)
from .design import DesignSpec, gaussian_design_oracle, var_beta, var_biomass_diff
from .engine import (
    Sampler,
    context_with_reads,
    draw_reads,
    joint_log_density,
    prior_state,
    run_chain,
    uncentred_loglik,
)
from .matnorm import (
    GhState,
    MatrixNormalParams,
    gh_prior_draw,
    gh_update_precision,
    kernel_covariance,
    leave_one_out_solves,
    matnorm_conditional_scalar,
    matnorm_draw,
    matnorm_logpdf,
)
from .pg import polya_gamma_sample
from .simulate import SimSettings, brier_study, simulate_dataset, spikein_study
from .state import ChainConfig, Draws, ModelContext, ModelState, build_context, initial_state
from .summaries import (
    BiomassSurface,
    SummaryReport,
    biodiversity_index,
    effective_sample_size,
    predict_biomass_grid,
    species_correlation,
    split_rhat,
    summarize_draws,
)

__all__ = [
    "__version__",
    "BACKEND_NAME",
    "HyperParams",
    "OtuDataset",
    "ValidationReport",
    "rescale_to_unit_square",
    "require_valid",
    "validate_dataset",
    "DesignSpec",
    "var_biomass_diff",
    "var_beta",
    "gaussian_design_oracle",
    "Sampler",
    "run_chain",
    "joint_log_density",
    "uncentred_loglik",
    "prior_state",
    "draw_reads",
    "context_with_reads",
    "MatrixNormalParams",
    "GhState",
    "kernel_covariance",
    "matnorm_logpdf",
    "matnorm_draw",
    "matnorm_conditional_scalar",
    "leave_one_out_solves",
    "gh_update_precision",
    "gh_prior_draw",
    "polya_gamma_sample",
    "SimSettings",
    "simulate_dataset",
    "brier_study",
    "spikein_study",
    "ChainConfig",
    "Draws",
    "ModelContext",
    "ModelState",
    "build_context",
    "initial_state",
    "SummaryReport",
    "BiomassSurface",
    "summarize_draws",
    "effective_sample_size",
    "split_rhat",
    "species_correlation",
    "predict_biomass_grid",
    "biodiversity_index",
]
