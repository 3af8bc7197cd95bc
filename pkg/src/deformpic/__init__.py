"""Deformation-based point-cloud in-context learning, implemented on numpy.

Modules:
    tensor      reverse-mode autodiff on numpy arrays
    geometry    sampling, patching, Chamfer / EMD / F-score, rotations
    shapes      procedural surface samplers
    dataset     in-context task records and their on-disk format
    model       DeformPIC and the masked-point-modeling baselines
    train       AdamW, schedule, checkpoints and the training loop
    evaluation  reports, comparison, task-feature analysis
    cli         the ``deformpic`` command
"""
from .dataset import DatasetConfig, build_dataset, load_dataset, patchify
from .evaluation import cluster_purity, compare, evaluate, extract_task_features, pca_project
from .model import DeformPIC, MPMBaseline, ModelConfig, build_model
from .train import TrainConfig, load_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DatasetConfig", "build_dataset", "load_dataset", "patchify",
    "cluster_purity", "compare", "evaluate", "extract_task_features", "pca_project",
    "DeformPIC", "MPMBaseline", "ModelConfig", "build_model",
    "TrainConfig", "load_checkpoint", "train",
]
