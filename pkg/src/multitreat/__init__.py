"""Causal inference for multiple treatments with binary outcomes.

Simulation of confounded multi-arm data, six effect estimators built around
generalized propensity scores and Bayesian nonparametric outcome models,
common-support diagnostics, and Monte Carlo sensitivity analysis for
unmeasured confounding.
"""

from .bart import BartPriors
from .data import (
    ContrastSpec,
    Dataset,
    EffectEstimate,
    EffectTable,
    GpsMatrix,
    PosteriorDraws,
    contrast_from_draws,
    pairwise_contrasts,
    summarize_replicates,
    validate_dataset,
)
from .estimators import (
    METHODS,
    CommonSupportReport,
    EstimationResult,
    MatchResult,
    MethodSpec,
    bart_discard,
    bart_estimate,
    bootstrap,
    estimate_effects,
    iptw_estimate,
    ra_estimate,
    rams_estimate,
    tmle_estimate,
    trim_weights,
    vm_estimate,
)
from .learners import (
    BayesLogit,
    MultinomialLogit,
    StackedEnsemble,
    StackedGps,
    kmeans_1d,
)
from .sensitivity import (
    ConfoundingFunctionPrior,
    ContourGrid,
    SaConfig,
    SaResult,
    adjust_outcomes,
    bias_from_confounding,
    contour_grid,
    run_sa,
)
from .simulate import SimConfig, SimOutput, simulate, write_outputs
from .validation import EstimationError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "BartPriors",
    "BayesLogit",
    "CommonSupportReport",
    "ConfoundingFunctionPrior",
    "ContourGrid",
    "ContrastSpec",
    "Dataset",
    "EffectEstimate",
    "EffectTable",
    "EstimationError",
    "EstimationResult",
    "GpsMatrix",
    "METHODS",
    "MatchResult",
    "MethodSpec",
    "MultinomialLogit",
    "PosteriorDraws",
    "SaConfig",
    "SaResult",
    "SimConfig",
    "SimOutput",
    "StackedEnsemble",
    "StackedGps",
    "ValidationError",
    "adjust_outcomes",
    "bart_discard",
    "bart_estimate",
    "bias_from_confounding",
    "bootstrap",
    "contour_grid",
    "contrast_from_draws",
    "estimate_effects",
    "iptw_estimate",
    "kmeans_1d",
    "pairwise_contrasts",
    "ra_estimate",
    "rams_estimate",
    "run_sa",
    "simulate",
    "summarize_replicates",
    "tmle_estimate",
    "trim_weights",
    "validate_dataset",
    "vm_estimate",
    "write_outputs",
    "__version__",
]
