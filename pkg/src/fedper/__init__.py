"""Federated learning with personalized prediction layers for pain detection."""

from .federation import REGIMES, FederationConfig, federated_average, run_round
from .metrics import accuracy, aggregate, f1, pr_auc
from .nn import Model, forward, gradient_check, init_params, pain_cnn
from .preprocess import binarize, histogram_equalize, pspi_score

__all__ = [
    "REGIMES", "FederationConfig", "Model", "accuracy", "aggregate", "binarize", "f1",
    "federated_average", "forward", "gradient_check", "histogram_equalize", "init_params",
    "pain_cnn", "pr_auc", "pspi_score", "run_round",
]
