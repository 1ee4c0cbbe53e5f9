"""Multi-interest CTR model with pretrained interest centers, and the
synthetic-data pipeline used to train and compare it."""

from .centers import InterestCenters, entropy_losses, init_centers, pretrain_centers
from .diffcore import Parameter, Tensor, adam_step, backward, finite_diff_check, tape
from .features import EmbeddingBundle, ItemRecord, load_embeddings, save_embeddings
from .mfn import MFNModel
from .synthgen import WorldConfig, generate_dataset, generate_world
from .traineval import auc, evaluate, rela_impr, train_model

__version__ = "0.1.0"

__all__ = [
    "EmbeddingBundle", "InterestCenters", "ItemRecord", "MFNModel", "Parameter", "Tensor", "WorldConfig",
    "adam_step", "auc", "backward", "entropy_losses", "evaluate", "finite_diff_check", "generate_dataset",
    "generate_world", "init_centers", "load_embeddings", "pretrain_centers", "rela_impr", "save_embeddings",
    "tape", "train_model",
]
