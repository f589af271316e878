"""Counterfactual debiasing for stance detection on a small numpy autograd core."""

from .corpus import LABELS, Example, SyntheticSpec, gen_synthetic, load_semeval
from .model import CausalStanceModel, EffectDecomposition, decompose_effects
from .trainer import TrainConfig, train
from .evaluator import evaluate_slices, macro_f1

__version__ = "0.1.0"

__all__ = [
    "LABELS", "Example", "SyntheticSpec", "gen_synthetic", "load_semeval",
    "CausalStanceModel", "EffectDecomposition", "decompose_effects",
    "TrainConfig", "train", "evaluate_slices", "macro_f1",
]
