"""Bayesian time-varying joint latent class models for longitudinal and survival data."""

from .data import Dataset, LongitudinalRecord, ModelSpec, SurvivalRecord
from .mcmc import Chain, MCMCConfig, run_chain
from .model import ParamState, Priors
from .simulation import SimDesign, simulate_dataset

__all__ = [
    "Chain",
    "Dataset",
    "LongitudinalRecord",
    "MCMCConfig",
    "ModelSpec",
    "ParamState",
    "Priors",
    "SimDesign",
    "SurvivalRecord",
    "run_chain",
    "simulate_dataset",
]
