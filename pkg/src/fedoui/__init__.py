"""Federated learning with OUI-guided client weighting."""

__version__ = "0.1.0"

from .aggregation import (ClientReport, aggregate, compute_weights, fedavg_weights,
                          fedoui_weights, gradalign_weights)
from .beta import (DEGENERATE, BetaParams, beta_median, bilateral_score, fit_beta_moments,
                   regularized_incomplete_beta)
from .harness import ExperimentConfig, ExperimentLog, RoundRecord, run_experiment, summary_metrics
from .oui import activation_mask, oui

__all__ = [
    "BetaParams", "ClientReport", "DEGENERATE", "ExperimentConfig", "ExperimentLog", "RoundRecord",
    "activation_mask", "aggregate", "beta_median", "bilateral_score", "compute_weights",
    "fedavg_weights", "fedoui_weights", "fit_beta_moments", "gradalign_weights", "oui",
    "regularized_incomplete_beta", "run_experiment", "summary_metrics",
]
