"""Ensemble Kalman Inversion training and uncertainty quantification for DeepONets."""
from .core import (Ensemble, OperatorDataset, FunctionPair, ParamVector, DomainMeta,
                   load_dataset, save_dataset, load_ensemble, save_ensemble)
from .deeponet import DeepONetArch, default_arch, param_count, forward, forward_ensemble
from .eki import EkiConfig, TrainReport, init_prior, kalman_update, perturb, predict, train
from .adaptive_q import QController, QControllerConfig, FixedQ
from .stopping import Stopper, StopperConfig

__all__ = [
    "Ensemble", "OperatorDataset", "FunctionPair", "ParamVector", "DomainMeta",
    "load_dataset", "save_dataset", "load_ensemble", "save_ensemble",
    "DeepONetArch", "default_arch", "param_count", "forward", "forward_ensemble",
    "EkiConfig", "TrainReport", "init_prior", "kalman_update", "perturb", "predict", "train",
    "QController", "QControllerConfig", "FixedQ", "Stopper", "StopperConfig",
]
__version__ = "0.1.0"
