"""Black-box variational inference toolkit.

Builds posterior approximations for a zoo of analytic target densities
using Gaussian or real-NVP variational families, four ELBO/IW-ELBO
gradient estimators, two step-size schemes, and Laplace initialization,
plus a benchmark harness for pairwise CCDF comparisons between methods.
"""

from bbvi.targets import TargetModel, make_zoo, get_model
from bbvi.families import (
    FamilyParams,
    init_standard,
    save_params,
    load_params,
    UnsupportedFamilyError,
)
from bbvi.estimators import EstimatorConfig, GradientEstimate, estimate_gradient
from bbvi.optimize import (
    AdamState,
    AdviStepState,
    adam_step,
    advi_step,
    step_size_grid,
    comprehensive_search,
    advi_step_search,
    laplace_init,
)
from bbvi.inference import EvalReport, evaluate, iw_sample
from bbvi.bench import PRESETS, MethodPreset, run_preset, pairwise_ccdf, run_suite

__all__ = [
    "TargetModel",
    "make_zoo",
    "get_model",
    "FamilyParams",
    "init_standard",
    "save_params",
    "load_params",
    "UnsupportedFamilyError",
    "EstimatorConfig",
    "GradientEstimate",
    "estimate_gradient",
    "AdamState",
    "AdviStepState",
    "adam_step",
    "advi_step",
    "step_size_grid",
    "comprehensive_search",
    "advi_step_search",
    "laplace_init",
    "EvalReport",
    "evaluate",
    "iw_sample",
    "PRESETS",
    "MethodPreset",
    "run_preset",
    "pairwise_ccdf",
    "run_suite",
]

__version__ = "0.1.0"
