"""Adversarial facial-feature protection and privacy/utility benchmarking."""

from .config import (
    DataConfig,
    EvalConfig,
    ExperimentConfig,
    ProtectionConfig,
    ReconConfig,
    RecognizerConfig,
    load_config,
    stage_seed,
)

__all__ = [
    "DataConfig",
    "EvalConfig",
    "ExperimentConfig",
    "ProtectionConfig",
    "ReconConfig",
    "RecognizerConfig",
    "load_config",
    "stage_seed",
]

__version__ = "0.1.0"
