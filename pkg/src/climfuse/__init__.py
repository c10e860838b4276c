"""Bayesian fusion of spatially correlated, inter-dependent climate-model ensembles."""

from .covariance import Grid, NotPositiveDefinite, build_correlation, factor, whittle_correlation
from .model import (
    EnsembleDataset,
    HyperParams,
    LatentState,
    ModelVariant,
    PriorConfig,
    log_joint_density,
)
from .sampler import ChainConfig, ChainOutput, initialize_state, run_chain
from .simulate import cmip5_sized_design, desk_design, generate, paper_design

__version__ = "0.1.0"

__all__ = [
    "Grid",
    "NotPositiveDefinite",
    "build_correlation",
    "factor",
    "whittle_correlation",
    "EnsembleDataset",
    "HyperParams",
    "LatentState",
    "ModelVariant",
    "PriorConfig",
    "log_joint_density",
    "ChainConfig",
    "ChainOutput",
    "initialize_state",
    "run_chain",
    "cmip5_sized_design",
    "desk_design",
    "generate",
    "paper_design",
]
