"""Toy decoder-only model, synthetic tasks and training loop."""

from memgate.toymodel.checkpoint import load_checkpoint, save_checkpoint
from memgate.toymodel.model import ModelConfig, ToyModel, build_model, cross_entropy
from memgate.toymodel.tasks import Batch, TaskSpec, gen_task, parity_of
from memgate.toymodel.train import Adam, TrainConfig, TrainResult, evaluate, train, write_trajectory_csv

__all__ = [
    "Adam",
    "Batch",
    "ModelConfig",
    "TaskSpec",
    "ToyModel",
    "TrainConfig",
    "TrainResult",
    "build_model",
    "cross_entropy",
    "evaluate",
    "gen_task",
    "load_checkpoint",
    "parity_of",
    "save_checkpoint",
    "train",
    "write_trajectory_csv",
]
