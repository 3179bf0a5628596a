"""Reward-free multi-head pretraining with kNN state-entropy rewards."""

from .estimators import entropy_knn, kl_knn, pairwise_diversity, particle_loss, weighted_entropy
from .jumpstart import GoalTask, PpoConfig, jumpstart_train
from .policy import MultiHeadPolicy, SingleHeadActor
from .train import TrainConfig, measure_diversity

__version__ = "0.1.0"

__all__ = [
    "GoalTask", "MultiHeadPolicy", "PpoConfig", "SingleHeadActor", "TrainConfig",
    "entropy_knn", "jumpstart_train", "kl_knn", "measure_diversity", "pairwise_diversity",
    "particle_loss", "weighted_entropy",
]
