"""Continual novelty detection benchmark on synthetic task sequences."""
from .config import ExperimentConfig, ScorerOptions, derive_seed
from .datasets import Regime, SequenceSpec, generate_sequence, import_dataset
from .harness import run_experiment, run_seed, sweep
from .metrics import auc, aupr_in, der
from .models import Model, ModelConfig, Setting
from .scorers import SCORERS

__all__ = [
    "ExperimentConfig", "ScorerOptions", "derive_seed",
    "Regime", "SequenceSpec", "generate_sequence", "import_dataset",
    "run_experiment", "run_seed", "sweep",
    "auc", "aupr_in", "der",
    "Model", "ModelConfig", "Setting",
    "SCORERS",
]
__version__ = "0.1.0"
