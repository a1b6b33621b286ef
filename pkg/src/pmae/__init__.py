"""Periodic masked autoencoder pre-training for remote photoplethysmography (rPPG)."""

from .datagen import SynthSpec, VideoClip, load_dataset, synth_clip, synth_dataset, write_dataset
from .estimators import HeartRateTransformer, PeriodicMAEPretrainer, RPPGRegressor
from .evaluation import MetricReport, ablation_report, bland_altman, evaluate
from .losses import (TrainingDivergenceError, bandwidth_loss, finetune_loss, pearson_loss,
                     pretrain_loss, psd_loss, reconstruction_loss, sparsity_loss)
from .masking import MaskPlan, apply_mask, make_mask
from .model import ModelConfig, PeriodicMAE
from .spectral import BandLimits, dominant_frequency, hr_from_signal, psd, snr_metric

__all__ = [
    "BandLimits", "HeartRateTransformer", "MaskPlan", "MetricReport", "ModelConfig",
    "PeriodicMAE", "PeriodicMAEPretrainer", "RPPGRegressor", "SynthSpec",
    "TrainingDivergenceError", "VideoClip", "ablation_report", "apply_mask", "bandwidth_loss",
    "bland_altman", "dominant_frequency", "evaluate", "finetune_loss", "hr_from_signal",
    "load_dataset", "make_mask", "pearson_loss", "pretrain_loss", "psd", "psd_loss",
    "reconstruction_loss", "snr_metric", "sparsity_loss", "synth_clip", "synth_dataset",
    "write_dataset",
]

__version__ = "0.1.0"
