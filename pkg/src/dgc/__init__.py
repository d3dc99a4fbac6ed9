"""Goal-oriented clustering: a mixture-prior VAE whose clusters are shaped by
side-information responses through per-cluster task heads."""

from .datasets import TaskData, build_noisy_digits, generate_pacman
from .evaluation import assign_clusters, cluster_accuracy, evaluate
from .losses import LossBreakdown, ablation_loss, dgc_loss, vade_loss
from .mixture import MixturePrior, optimal_q, optimal_q_regularized, test_q
from .networks import DGCModel, ModelSpec, get_preset
from .training import TrainConfig, train

__all__ = [
    "DGCModel", "LossBreakdown", "MixturePrior", "ModelSpec", "TaskData", "TrainConfig",
    "ablation_loss", "assign_clusters", "build_noisy_digits", "cluster_accuracy", "dgc_loss", "evaluate",
    "generate_pacman", "get_preset", "optimal_q", "optimal_q_regularized", "test_q", "train", "vade_loss",
]
__version__ = "0.1.0"
