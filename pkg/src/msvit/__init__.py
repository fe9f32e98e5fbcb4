"""Multi-scale spiking vision transformer.

Spike-driven hierarchical transformer with multi-scale spiking attention,
surrogate-gradient training and synaptic-operation energy accounting.
"""
from .config import ConfigError, ModelConfig, load_profile, profile_names
from .energy import EnergyReport, Profiler, compute_energy, count_flops
from .estimator import MSViTClassifier
from .model import MSViT, build_model, count_parameters
from .spike import LifParams, LifState, lif_forward

__all__ = [
    "ConfigError", "EnergyReport", "LifParams", "LifState", "MSViT", "MSViTClassifier",
    "ModelConfig", "Profiler", "build_model", "compute_energy", "count_flops",
    "count_parameters", "lif_forward", "load_profile", "profile_names",
]

__version__ = "0.1.0"
