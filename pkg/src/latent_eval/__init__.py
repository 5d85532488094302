"""Latent-space performance metrics for classifiers with generative models of their data."""

__version__ = "0.1.0"

from .attack import AttackConfig, AttackResult, pgd_bounded, pgd_min_norm, pgd_original_space
from .latentnoise import NoiseBudget, decay_factor, g_transform, log_likelihood, sample_noisy
from .metrics import (
    MetricEstimate, adversarial_severity, clean_accuracy, correlations, laga, lags, lara, lars,
    lga, llar_threshold_check, llna, lra, noise_accuracy,
)
from .models import (
    FeedForwardClassifier, GenerativePair, GroundTruthDecoder, encode, load_model, save_model,
)
from .training import TrainConfig, WorldConfig, make_world, train, train_all

__all__ = [
    "AttackConfig", "AttackResult", "FeedForwardClassifier", "GenerativePair",
    "GroundTruthDecoder", "MetricEstimate", "NoiseBudget", "TrainConfig", "WorldConfig",
    "adversarial_severity", "clean_accuracy", "correlations", "decay_factor", "encode",
    "g_transform", "laga", "lags", "lara", "lars", "lga", "llar_threshold_check", "llna",
    "load_model", "log_likelihood", "lra", "make_world", "noise_accuracy", "pgd_bounded",
    "pgd_min_norm", "pgd_original_space", "sample_noisy", "save_model", "train", "train_all",
]
