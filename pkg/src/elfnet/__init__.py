"""Early-exit training and inference for long-tailed classification."""

from .data import (
    LongTailedDataset,
    SplitAssignment,
    load_dataset,
    longtail_counts,
    make_longtail,
    save_dataset,
    split_classes,
    synth_gaussian,
)
from .estimator import ElfClassifier
from .exits import (
    ExitPolicy,
    ExitTrace,
    elf_loss,
    infer_exit_criterion,
    predict,
    train_exit_criterion,
)
from .losses import (
    ClassWeights,
    DrwSchedule,
    MarginVector,
    effective_weights,
    focal,
    ldam,
    ldam_margins,
    weighted_ce,
)
from .model import MultiExitNetwork, build_network, load_checkpoint, save_checkpoint
from .train import TrainConfig, lr_at, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "ClassWeights",
    "DrwSchedule",
    "ElfClassifier",
    "ExitPolicy",
    "ExitTrace",
    "LongTailedDataset",
    "MarginVector",
    "MultiExitNetwork",
    "SplitAssignment",
    "TrainConfig",
    "build_network",
    "effective_weights",
    "elf_loss",
    "focal",
    "infer_exit_criterion",
    "ldam",
    "ldam_margins",
    "load_checkpoint",
    "load_dataset",
    "longtail_counts",
    "lr_at",
    "make_longtail",
    "predict",
    "save_checkpoint",
    "save_dataset",
    "sgd_step",
    "split_classes",
    "synth_gaussian",
    "train",
    "train_exit_criterion",
    "weighted_ce",
]
