"""Mixture of cluster-conditional experts (MoCE) for masked-image pre-training.

A small numpy reimplementation: a reverse-mode tensor engine, balanced
Sinkhorn clustering, an MAE vision transformer with expert banks routed per
cluster, the training loops, sub-model deployment and a file-based CLI.
"""
from .clustering import ClusterModel, assign, cluster, extract_features, sinkhorn_project
from .deployment import ExpertSelection, extract_submodel, finetune_probe, psnr, select_expert
from .io import Checkpoint, Dataset, load_checkpoint, read_dataset, save_checkpoint, \
    write_dataset
from .model import ModelConfig, MoceNetwork
from .synthetic import SyntheticCorpusConfig, gen_synthetic
from .training import TrainConfig, pretrain_dense, pretrain_moce, routing_table

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ClusterModel", "Dataset", "ExpertSelection", "ModelConfig", "MoceNetwork",
    "SyntheticCorpusConfig", "TrainConfig", "assign", "cluster", "extract_features",
    "extract_submodel", "finetune_probe", "gen_synthetic", "load_checkpoint", "pretrain_dense",
    "pretrain_moce", "psnr", "read_dataset", "routing_table", "save_checkpoint",
    "select_expert", "sinkhorn_project", "write_dataset",
]
