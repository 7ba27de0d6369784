"""Bayesian g-computation for dynamic treatment regimes with multivariate
generalized linear mixed-effects models and a time-invariant unmeasured
confounding sensitivity parameter."""

from .model import (FeatureTerm, LongDataset, ModelSpec, ParamsDraw, PriorSpec,
                    SpecError, SubjectRecord, Violation, baseline,
                    dose_indicator, intercept, interaction, lagged_confounder,
                    lagged_outcome, time_term, treatment_indicator,
                    validate_dataset)
from .design import History, HistoryBatch, build_design_row
from .regimes import (AlwaysTreat, AsObservedThen, InitiateAt, NeverTreat,
                      Regime, parse_regime)
from .simulate import (DgpConfig, dgp_model_spec, dgp_truth, simulate_dgp,
                       simulate_mglmm)
from .heterogeneity import (ConditionalGaussian, LaplaceError, LaplaceSummary,
                            condition_on_bA, grad_log_post_b, hess_log_post_b,
                            laplace_approx, log_post_b,
                            sample_bA_given_history)
from .inference import (BayesianMglmm, FitError, McmcConfig, PosteriorDraws,
                        fit_mglmm, loglik_joint)
from .gcomputation import (ContrastRequest, ContrastResult, NoisePanel,
                           TrajectoryError, build_noise_panel, mixed_ate,
                           project_counterfactual, subgroup_contrast)
from .study import (GridError, GridResult, GridSpec, closed_form_ate,
                    oracle_ate_mc, run_grid)

__version__ = "0.1.0"

__all__ = [
    "AlwaysTreat", "AsObservedThen", "BayesianMglmm", "ConditionalGaussian",
    "ContrastRequest", "ContrastResult", "DgpConfig", "FeatureTerm",
    "FitError", "GridError", "GridResult", "GridSpec", "History",
    "HistoryBatch", "InitiateAt", "LaplaceError", "LaplaceSummary",
    "LongDataset", "McmcConfig", "ModelSpec", "NeverTreat", "NoisePanel",
    "ParamsDraw", "PosteriorDraws", "PriorSpec", "Regime", "SpecError",
    "SubjectRecord", "TrajectoryError", "Violation", "baseline",
    "build_design_row", "build_noise_panel", "closed_form_ate",
    "condition_on_bA", "dgp_model_spec", "dgp_truth", "dose_indicator",
    "fit_mglmm", "grad_log_post_b", "hess_log_post_b", "intercept",
    "interaction", "lagged_confounder", "lagged_outcome", "laplace_approx",
    "log_post_b", "loglik_joint", "mixed_ate", "oracle_ate_mc",
    "parse_regime", "project_counterfactual", "run_grid",
    "sample_bA_given_history", "simulate_dgp", "simulate_mglmm",
    "subgroup_contrast", "time_term", "treatment_indicator",
    "validate_dataset",
]
