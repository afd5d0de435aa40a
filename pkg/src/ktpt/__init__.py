"""Knowledge-transfer pre-training for sequence classifiers, built on numpy."""

from .data import DataSplits, GeneratorConfig, SequenceDataset, generate_synthetic
from .models import Mlp, Rbm, StackedLstm, load_model, save_model
from .numerics import Pcg32, rng_for
from .pretrain import PretrainPlan, SoftTargetSet, fine_tune, kt_pretrain, run_plan
from .train import SgdConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "DataSplits", "GeneratorConfig", "SequenceDataset", "generate_synthetic",
    "Mlp", "Rbm", "StackedLstm", "load_model", "save_model",
    "Pcg32", "rng_for",
    "PretrainPlan", "SoftTargetSet", "fine_tune", "kt_pretrain", "run_plan",
    "SgdConfig", "run_training",
]
