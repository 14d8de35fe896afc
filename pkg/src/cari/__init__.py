"""Causal representation learning with an information bottleneck, a CLUB-based
intervention term and minimax robustness in representation space.

Everything runs on a small reverse-mode autodiff engine over float64 NumPy.
"""
from .attack import AttackConfig, pgd, worst_case_pair
from .data import Dataset, load_rating_csv, read_factor_csv, split, write_factor_csv
from .errors import CariError, ConfigError, DataError, DivergenceError, ShapeError
from .metrics import evaluate, scaling_check
from .model import ModelState, PriorConfig, init_model, load_checkpoint, save_checkpoint
from .synthgen import ScmConfig, generate
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "CariError", "ConfigError", "DataError", "Dataset", "DivergenceError", "ModelState",
    "PriorConfig", "ScmConfig", "ShapeError", "TrainConfig", "evaluate", "generate", "init_model",
    "load_checkpoint", "load_rating_csv", "pgd", "read_factor_csv", "save_checkpoint", "scaling_check",
    "split", "train", "worst_case_pair", "write_factor_csv",
]
