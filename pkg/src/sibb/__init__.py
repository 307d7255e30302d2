"""Graph-regularized dictionary learning of sparse building blocks across states."""

from .data import (DatasetError, MultiStateDataset, TrialObservation, hconcat_observations,
                   load_dataset, save_dataset, vconcat_traces)
from .trainer import BBModel, HyperParams, fit, reconstruct

__all__ = [
    "BBModel",
    "DatasetError",
    "HyperParams",
    "MultiStateDataset",
    "TrialObservation",
    "fit",
    "hconcat_observations",
    "load_dataset",
    "reconstruct",
    "save_dataset",
    "vconcat_traces",
]

__version__ = "0.1.0"
