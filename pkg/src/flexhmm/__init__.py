"""Hidden Markov models with covariate-dependent transition probabilities and
observation parameters (fixed effects, penalized splines, normal random
intercepts), fitted by maximizing a Laplace-approximated marginal likelihood."""

from jax import config as _jax_config

# Everything here assumes double precision; enable it before any submodule
# touches jax.
_jax_config.update("jax_enable_x64", True)

__version__ = "0.1.0"

from .data import Dataset, from_arrays, load_csv, write_csv
from .dists import get_family
from .frame import ModelFrame, ParameterSet
from .inference import (
    PPCResult,
    PredictionRequest,
    posterior_predictive_check,
    predict,
    pseudo_residuals,
    simulate_ci,
    state_probs,
    viterbi,
)
from .likelihood import (
    FitResult,
    fit,
    forward_loglik,
    laplace_marginal_nll,
    marginal_loglik,
    penalized_joint_nll,
    suggest_initial,
)
from .model import (
    FitOptions,
    ModelSpec,
    load_spec,
    make_spec,
    save_spec,
    spec_from_yaml,
    spec_to_yaml,
    with_options,
)
from .simulate import SimConfig, drop_state_column, simulate

__all__ = [
    "Dataset",
    "FitOptions",
    "FitResult",
    "ModelFrame",
    "ModelSpec",
    "PPCResult",
    "ParameterSet",
    "PredictionRequest",
    "SimConfig",
    "drop_state_column",
    "fit",
    "from_arrays",
    "get_family",
    "forward_loglik",
    "laplace_marginal_nll",
    "load_csv",
    "load_spec",
    "make_spec",
    "marginal_loglik",
    "penalized_joint_nll",
    "posterior_predictive_check",
    "predict",
    "pseudo_residuals",
    "save_spec",
    "simulate",
    "simulate_ci",
    "spec_from_yaml",
    "spec_to_yaml",
    "state_probs",
    "suggest_initial",
    "viterbi",
    "with_options",
    "write_csv",
]
