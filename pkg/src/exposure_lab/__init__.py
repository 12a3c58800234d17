"""Desk-scale diffusion sampling lab: exposure-bias measurement and epsilon scaling."""

from .data import GaussianDataSpec, GaussianMixture, TwoMoons, make_data
from .denoiser import (AnalyticDenoiser, ConstantEps, EpsPrediction, ErrorProfile, NoisyOracle,
                       NoisyOracleConfig, PerturbedAnalytic, analytic_eps, noisy_oracle_eps)
from .diagnostics import (BiasReport, MomentAccumulator, frechet_gap_1d, frechet_gaussian,
                          measure_delta_t, measure_eps_norms, measure_multi_step_error,
                          measure_single_step_error)
from .mlp import MlpDenoiser, TrainConfig, load_weights, mlp_eps, save_weights, train_mlp
from .sampler import (ChainRecord, SamplerConfig, ddim_step, ddpm_step, euler_step, heun_step,
                      run_chain)
from .scaling import NormRatioSeries, ScalingSchedule, invert_norm_ratio, lambda_at
from .schedule import (NoiseSchedule, RespacedSchedule, VarChoice, default_linear_schedule,
                       make_linear_schedule, respace)
from .theory import (VariancePrediction, ddim_single_step_var, ddpm_single_step_var,
                     ddpm_two_step_var, gaussian_chain_var)

__all__ = [
    "GaussianDataSpec", "GaussianMixture", "TwoMoons", "make_data", "AnalyticDenoiser",
    "ConstantEps", "EpsPrediction", "ErrorProfile", "NoisyOracle", "NoisyOracleConfig",
    "PerturbedAnalytic", "analytic_eps", "noisy_oracle_eps", "BiasReport", "MomentAccumulator",
    "frechet_gap_1d", "frechet_gaussian", "measure_delta_t", "measure_eps_norms",
    "measure_multi_step_error", "measure_single_step_error", "MlpDenoiser", "TrainConfig",
    "load_weights", "mlp_eps", "save_weights", "train_mlp", "ChainRecord", "SamplerConfig",
    "ddim_step", "ddpm_step", "euler_step", "heun_step", "run_chain", "NormRatioSeries",
    "ScalingSchedule", "invert_norm_ratio", "lambda_at", "NoiseSchedule", "RespacedSchedule",
    "VarChoice", "default_linear_schedule", "make_linear_schedule", "respace",
    "VariancePrediction", "ddim_single_step_var", "ddpm_single_step_var", "ddpm_two_step_var",
    "gaussian_chain_var",
]

__version__ = "0.1.0"
