"""Relational novelty detection on fixed embeddings, built on a small numpy autodiff core."""
from .data import LabeledDataset, SyntheticSpec, benchmark_spec, create_pairs, generate_synthetic
from .evaluation import MetricsReport, ScoreSet, auroc, evaluate, fpr95
from .model import ModelConfig, RelationalModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"
