"""Federated domain generalization with mixed instance/batch normalization, at desk scale.

numpy-only: a small reverse-mode autodiff core, BN/IN/mixed normalization
layers, a federated round engine with a guiding regularizer, a synthetic
multi-domain generator and the leave-one-domain-out experiment harness.
"""
from .errors import FdglabError
from .harness import ExperimentConfig, run_experiment, run_single
from .model import ModelSpec, build_model

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "FdglabError", "ModelSpec", "build_model", "run_experiment", "run_single"]
