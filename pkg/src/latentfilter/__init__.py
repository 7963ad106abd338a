"""Ensemble filtering with linear latent variable models (EnLLVM) and an EnKF baseline."""
from .config import BenchConfig, ConfigError, load_config, lorenz63_defaults, parse_config, table1_grid
from .dynamics import DivergenceError, DynSystem, MeasModel, generate_twin, integrate, lorenz63, lorenz96
from .filters import EnllvmConfig, FilterState, TrialResult, enkf_cycle, enllvm_cycle, run_trial
from .llvm import EmOptions, JointEnsemble, LatentPosterior, LlvmParams, Variant, fit_llvm, latent_posteriors
from .mixture import (
    FactoredCov,
    GaussianMixture,
    build_joint_mixture,
    condition_mixture,
    inflate_noise,
    mixture_moments,
    sample_mixture,
)

__version__ = "0.1.0"

__all__ = [
    "BenchConfig", "ConfigError", "DivergenceError", "DynSystem", "EmOptions", "EnllvmConfig",
    "FactoredCov", "FilterState", "GaussianMixture", "JointEnsemble", "LatentPosterior",
    "LlvmParams", "MeasModel", "TrialResult", "Variant", "build_joint_mixture", "condition_mixture",
    "enkf_cycle", "enllvm_cycle", "fit_llvm", "generate_twin", "inflate_noise", "integrate",
    "latent_posteriors", "load_config", "lorenz63", "lorenz63_defaults", "lorenz96",
    "mixture_moments", "parse_config", "run_trial", "sample_mixture", "table1_grid",
]
