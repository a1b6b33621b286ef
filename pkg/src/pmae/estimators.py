"""
scikit-learn style wrappers around the training loops.

``PeriodicMAEPretrainer`` is a transformer (``fit`` on unlabelled videos,
``transform`` to per-frame encoder features), ``RPPGRegressor`` maps videos
to pulse traces and ``HeartRateTransformer`` turns traces into heart rates.
Videos are ``(n_clips, T, H, W, 3)`` float arrays in [0, 1].
"""

from __future__ import annotations

import copy
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datagen import VideoClip
from .model import ModelConfig, PeriodicMAE
from .spectral import BandLimits, hr_from_signal
from .training import (LossSettings, MaskSettings, finetune_model, finetune_optim,
                       predictor, pretrain_model, pretrain_optim, transfer_pretrained)


def check_video_array(X, allow_single: bool = True) -> np.ndarray:
    """Validate a video batch and return it as contiguous float32 ``(N, T, H, W, 3)``."""
    X = np.asarray(X)
    if X.ndim == 4 and allow_single:
        X = X[None]
    if X.ndim != 5 or X.shape[-1] != 3:
        raise ValueError(f"expected videos of shape (n_clips, T, H, W, 3), got {X.shape}")
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"video array must be numeric, got dtype {X.dtype}")
    if X.shape[0] == 0:
        raise ValueError("empty video batch")
    if X.shape[2] % 16 or X.shape[3] % 16:
        raise ValueError(f"frame size {X.shape[2]}x{X.shape[3]} is not a multiple of 16")
    X = np.ascontiguousarray(X, dtype=np.float32)
    if not np.isfinite(X).all():
        raise ValueError("video array contains NaN or inf")
    return X


def check_signal(y, n_clips: Optional[int] = None, T: Optional[int] = None) -> np.ndarray:
    """Validate pulse labels and return float64 ``(n_clips, T)``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    if y.ndim != 2:
        raise ValueError(f"expected signals of shape (n_clips, T), got {y.shape}")
    if n_clips is not None and y.shape[0] != n_clips:
        raise ValueError(f"{y.shape[0]} label rows for {n_clips} clips")
    if T is not None and y.shape[1] != T:
        raise ValueError(f"label length {y.shape[1]} does not match {T} frames")
    if not np.isfinite(y).all():
        raise ValueError("signal contains NaN or inf")
    return y


def _clips(X, y, fs):
    return [VideoClip(frames=X[i], fs=fs, ppg=None if y is None else y[i], clip_id=f"clip{i:05d}")
            for i in range(len(X))]


class _ModelParams(BaseEstimator):
    def _model_config(self, X) -> ModelConfig:
        _, T, H, W, _ = X.shape
        return ModelConfig(D=self.D, enc_depth=self.enc_depth, dec_depth=self.dec_depth,
                           heads=self.heads, C_stem=self.C_stem, T=T, H=H, W=W,
                           seed=self.random_state)

    def _check_shape(self, X):
        c = self.model_.config
        if X.shape[1:4] != (c.T, c.H, c.W):
            raise ValueError(f"estimator was fitted on ({c.T}, {c.H}, {c.W}) clips, got {X.shape[1:4]}")


class PeriodicMAEPretrainer(TransformerMixin, _ModelParams):
    """Self-supervised pre-training with periodic (or baseline) masking.

    ``transform`` returns spatially pooled encoder features ``(N, T, D)``.
    """

    def __init__(self, D=64, enc_depth=4, dec_depth=4, heads=4, C_stem=32, fs=30.0,
                 epochs=120, batch_size=4, base_lr=0.1, mask_strategy="periodic",
                 mask_ratio=0.75, bandwidth=True, sparsity=True, random_state=0):
        self.D = D
        self.enc_depth = enc_depth
        self.dec_depth = dec_depth
        self.heads = heads
        self.C_stem = C_stem
        self.fs = fs
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.mask_strategy = mask_strategy
        self.mask_ratio = mask_ratio
        self.bandwidth = bandwidth
        self.sparsity = sparsity
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_video_array(X)
        self.model_ = PeriodicMAE(self._model_config(X))
        optim = pretrain_optim(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
                               seed=self.random_state)
        _, self.record_ = pretrain_model(
            self.model_, _clips(X, None, self.fs), optim,
            MaskSettings(strategy=self.mask_strategy, ratio=self.mask_ratio),
            LossSettings(bandwidth=self.bandwidth, sparsity=self.sparsity))
        self.n_features_out_ = self.D
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_video_array(X)
        self._check_shape(X)
        self.model_.eval()
        with torch.no_grad():
            enc = self.model_.encode_full(torch.from_numpy(X))
        return enc.mean(dim=(2, 3)).numpy().astype(np.float64)


class RPPGRegressor(RegressorMixin, _ModelParams):
    """Supervised pulse regression; ``pretrained`` may be a fitted
    :class:`PeriodicMAEPretrainer` whose weights initialise the model."""

    def __init__(self, D=64, enc_depth=4, dec_depth=4, heads=4, C_stem=32, fs=30.0,
                 epochs=30, batch_size=8, base_lr=1e-3, lambda1=100.0, augment=True,
                 pretrained=None, random_state=0):
        self.D = D
        self.enc_depth = enc_depth
        self.dec_depth = dec_depth
        self.heads = heads
        self.C_stem = C_stem
        self.fs = fs
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.lambda1 = lambda1
        self.augment = augment
        self.pretrained = pretrained
        self.random_state = random_state

    def fit(self, X, y):
        X = check_video_array(X)
        y = check_signal(y, len(X), X.shape[1])
        self.model_ = PeriodicMAE(self._model_config(X))
        if self.pretrained is not None:
            check_is_fitted(self.pretrained, "model_")
            transfer_pretrained(self.model_, copy.deepcopy(self.pretrained.model_.state_dict()))
        optim = finetune_optim(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
                               seed=self.random_state)
        _, self.record_ = finetune_model(self.model_, _clips(X, y, self.fs), optim,
                                         LossSettings(lambda1=self.lambda1), augment=self.augment)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_video_array(X)
        self._check_shape(X)
        f = predictor(self.model_)
        return np.stack([f(x) for x in X])

    def score(self, X, y, sample_weight=None):
        """Mean Pearson correlation between predicted and reference traces."""
        p = self.predict(X)
        y = check_signal(y, len(p), p.shape[1])
        pc = p - p.mean(1, keepdims=True)
        yc = y - y.mean(1, keepdims=True)
        r = (pc * yc).sum(1) / np.sqrt((pc ** 2).sum(1) * (yc ** 2).sum(1) + 1e-8)
        return float(np.average(r, weights=sample_weight))


class HeartRateTransformer(TransformerMixin, BaseEstimator):
    """Stateless: pulse traces ``(N, T)`` to heart rates ``(N,)`` in bpm."""

    def __init__(self, fs=30.0, band_lo=40.0 / 60.0, band_hi=3.0, window=None):
        self.fs = fs
        self.band_lo = band_lo
        self.band_hi = band_hi
        self.window = window

    def fit(self, X, y=None):
        check_signal(X)
        BandLimits(self.band_lo, self.band_hi).check(self.fs)
        self.n_features_in_ = np.asarray(X).shape[-1]
        return self

    def transform(self, X):
        X = check_signal(X)
        band = BandLimits(self.band_lo, self.band_hi)
        return np.array([hr_from_signal(x, self.fs, band, window=self.window) for x in X])
