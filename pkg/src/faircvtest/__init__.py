"""Synthetic testbed for demographic bias in multimodal resume scoring."""

from .faircvdb import (
    FairCVDataset, GenerationConfig, generate_dataset, load_dataset, save_dataset, split_dataset,
)
from .fairmetrics import histogram, kl_divergence, pairwise_mean_kl, top_k_rates
from .scenarios import MLPScorer, ScenarioConfig, run_all, run_scenario
from .sensinets import AgnosticTrainConfig, AgnosticTransform, audit_leakage, train_agnostic
from .synthembed import EmbeddingGenConfig, LinearProbe, fit_probe

__version__ = "0.1.0"

__all__ = [
    "AgnosticTrainConfig", "AgnosticTransform", "EmbeddingGenConfig", "FairCVDataset",
    "GenerationConfig", "LinearProbe", "MLPScorer", "ScenarioConfig", "audit_leakage",
    "fit_probe", "generate_dataset", "histogram", "kl_divergence", "load_dataset",
    "pairwise_mean_kl", "run_all", "run_scenario", "save_dataset", "split_dataset",
    "top_k_rates", "train_agnostic",
]
