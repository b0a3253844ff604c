"""Adversarial unlearning requests: attacks on gradient-ascent unlearning,
request-verification defenses, and the linear existence construction."""

from .attacks import (AttackResult, AttackSpec, black_box_attack, black_box_attack_avg,
                      estimate_gradient_zo, run_attack, selection_attack, white_box_attack)
from .data import DatasetSplit, SyntheticSpec, generate, sample_forget_set
from .models import Architecture, Model, OptimizerSpec, accuracy, mlp, linear, train_model
from .rng import Rng, unit_sphere_sample
from .unlearning import UnlearnSpec, exact_retrain, unlearn, unlearn_unrolled

__all__ = [
    "AttackResult", "AttackSpec", "black_box_attack", "black_box_attack_avg",
    "estimate_gradient_zo", "run_attack", "selection_attack", "white_box_attack",
    "DatasetSplit", "SyntheticSpec", "generate", "sample_forget_set",
    "Architecture", "Model", "OptimizerSpec", "accuracy", "mlp", "linear", "train_model",
    "Rng", "unit_sphere_sample",
    "UnlearnSpec", "exact_retrain", "unlearn", "unlearn_unrolled",
]
__version__ = "0.1.0"
