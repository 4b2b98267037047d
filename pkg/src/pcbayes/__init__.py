"""Sampling-free Bayesian updating on Hermite polynomial chaos expansions.

Uncertain parameters are carried as coefficient tensors in a multivariate
Hermite basis; measurements update them through polynomial approximations
of the conditional expectation: the linear (Kalman-gain) update, a
closed-form quadratic update, and a general degree-n filter obtained from a
symmetric moment system.  An Ensemble Kalman Filter provides the sampling
baseline, and a small harness reruns the identification experiments from
declarative config files.
"""

from .hermite import (
    IndexSet,
    MultiIndex,
    expect_hermite_product,
    factorial_norm,
    hermite_eval,
    product_linearize,
    total_degree_set,
)
from .pce import (
    PceVector,
    QuadratureRule,
    SymmetricTensor,
    covariance,
    cross_moment,
    gauss_hermite_rule,
    load_pce,
    mean,
    project,
    raw_moment_tensor,
    sample,
    save_pce,
)
from .update import (
    HankelSystem,
    UpdateMap,
    apply_update_map,
    build_hankel_system,
    half_normal_moment,
    kalman_gain,
    lbu_update,
    nlbu2_closed_form,
    solve_update_map,
)
from .enkf import Ensemble, enkf_update
from .harness import ExperimentConfig, RunReport, kde, load_config, quantile_track, rms_error, run_experiment

__version__ = "0.1.0"

__all__ = [
    "Ensemble",
    "ExperimentConfig",
    "HankelSystem",
    "IndexSet",
    "MultiIndex",
    "PceVector",
    "QuadratureRule",
    "RunReport",
    "SymmetricTensor",
    "UpdateMap",
    "apply_update_map",
    "build_hankel_system",
    "covariance",
    "cross_moment",
    "enkf_update",
    "expect_hermite_product",
    "factorial_norm",
    "gauss_hermite_rule",
    "half_normal_moment",
    "hermite_eval",
    "kalman_gain",
    "kde",
    "lbu_update",
    "load_config",
    "load_pce",
    "mean",
    "nlbu2_closed_form",
    "product_linearize",
    "project",
    "quantile_track",
    "raw_moment_tensor",
    "rms_error",
    "run_experiment",
    "sample",
    "save_pce",
    "solve_update_map",
    "total_degree_set",
]
