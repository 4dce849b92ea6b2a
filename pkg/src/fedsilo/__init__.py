"""Federated and federated-autonomous training of small dense networks on siloed data."""

__version__ = "0.1.0"

from .data import GenSpec, SiloDataset, generate, load_csv, save_csv, split, split_all
from .estimators import CentralizedClassifier, FADLClassifier, FedAvgClassifier
from .fadl import FadlConfig, SpecializedEnsemble, predict_routed, run_fadl
from .federated import CycleTrace, FedConfig, aggregate, run_federated
from .isolation import IsolationAudit
from .metrics import EvalReport, auc_pr, auc_roc
from .nn import Model, axpy_model, backward, forward, init_model, load_model, loss, save_model
from .training import TrainSpec, train, train_centralized

__all__ = [
    "CentralizedClassifier", "CycleTrace", "EvalReport", "FADLClassifier", "FadlConfig",
    "FedAvgClassifier", "FedConfig", "GenSpec", "IsolationAudit", "Model", "SiloDataset",
    "SpecializedEnsemble", "TrainSpec", "aggregate", "auc_pr", "auc_roc", "axpy_model",
    "backward", "forward", "generate", "init_model", "load_csv", "load_model", "loss",
    "predict_routed", "run_fadl", "run_federated", "save_csv", "save_model", "split",
    "split_all", "train", "train_centralized",
]
