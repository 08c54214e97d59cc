"""Causal-disentanglement full-reference image quality assessment at desk scale."""

from .degrade import DegradationProtocol, DegradationSpec, Manifest, apply_degradation, build_dataset, split_manifest
from .errors import CadisError, ConfigurationError, FittingError, InputError, TrainingError, ValidationError
from .networks import CadisNet, NetConfig, causal_modulate, dag_acyclicity_penalty, desk_config, film, paper_config

__version__ = "0.1.0"

__all__ = [
    "CadisError",
    "CadisNet",
    "ConfigurationError",
    "DegradationProtocol",
    "DegradationSpec",
    "FittingError",
    "InputError",
    "Manifest",
    "NetConfig",
    "TrainingError",
    "ValidationError",
    "apply_degradation",
    "build_dataset",
    "causal_modulate",
    "dag_acyclicity_penalty",
    "desk_config",
    "film",
    "paper_config",
    "split_manifest",
]
