"""scikit-learn style estimators over in-memory sequences.

``X`` is a list of degraded sequences, each an array ``(T, H, W)`` or
``(T, H, W, C)`` in ``[0, 1]``.  Targets are clean sequences for
:class:`DparNetRestorer` and ``(H, W)`` normalized parameter maps for
:class:`ParamMapEstimator`.
"""
from __future__ import annotations

from typing import List

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .core import MIN_MODEL_SIZE, DegradationKind, ParamMap, Sequence
from .data import Sample
from .metrics import psnr
from .models import ModelConfig, Variant, dparnet_forward, param_net_forward
from .train import TrainConfig, fit_dparnet, fit_param_net


def check_sequence(seq, min_size: int = MIN_MODEL_SIZE) -> Sequence:
    """Validate one sequence and return it as a :class:`Sequence`."""
    if isinstance(seq, Sequence):
        frames = seq.frames
    else:
        frames = np.asarray(seq, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.ndim != 4:
        raise ValueError(f"expected a (T, H, W[, C]) sequence, got shape {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("sequence contains non-finite values")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise ValueError("sequence values must lie in [0, 1]")
    H, W = frames.shape[1:3]
    if H < min_size or W < min_size:
        raise ValueError(f"frames must be at least {min_size}x{min_size}, got {H}x{W}")
    return seq if isinstance(seq, Sequence) else Sequence(frames)


def check_sequences(X, min_size: int = MIN_MODEL_SIZE) -> List[Sequence]:
    """Accept a list of sequences, a single :class:`Sequence`, or a stacked ``(N, T, H, W[, C])`` array."""
    if isinstance(X, Sequence):
        X = [X]
    elif isinstance(X, np.ndarray):
        if X.ndim not in (4, 5):
            raise ValueError(f"a stacked array of sequences must be 4-D or 5-D, got {X.ndim}-D")
        X = list(X)
    seqs = [check_sequence(x, min_size) for x in X]
    if not seqs:
        raise ValueError("no sequences given")
    return seqs


def check_pmaps(P, seqs: List[Sequence], kind) -> List[ParamMap]:
    if len(P) != len(seqs):
        raise ValueError(f"got {len(P)} parameter maps for {len(seqs)} sequences")
    maps = []
    for p, s in zip(P, seqs):
        pm = p if isinstance(p, ParamMap) else ParamMap(np.asarray(p, dtype=np.float32), kind)
        if pm.shape != s.spatial_shape:
            raise ValueError(f"parameter map {pm.shape} does not match frames {s.spatial_shape}")
        maps.append(pm)
    return maps


def _samples(X, Y, P) -> List[Sample]:
    return [Sample(x, y, p, len(x) // 2) for x, y, p in zip(X, Y, P)]


def _holdout(n: int, fraction: float, seed: int):
    idx = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n)) if n > 1 else 0
    return idx[n_val:], idx[:n_val]


class ParamMapEstimator(BaseEstimator, RegressorMixin, TransformerMixin):
    """Predict per-pixel degradation parameter maps from degraded sequences."""

    def __init__(self, kind="noise", param_channels=32, lr=1e-4, epochs=100, batch_size=4,
                 crop=256, validation_fraction=0.1, random_state=0):
        self.kind = kind
        self.param_channels = param_channels
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.crop = crop
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        seqs = check_sequences(X)
        kind = DegradationKind(self.kind)
        maps = check_pmaps(y, seqs, kind)
        samples = _samples(seqs, seqs, maps)
        tr, va = _holdout(len(samples), self.validation_fraction, self.random_state)
        cfg = TrainConfig(lr=self.lr, epochs=self.epochs, alpha2=0.0, batch_size=self.batch_size,
                          seed=self.random_state, crop=self.crop)
        mcfg = ModelConfig(in_channels=seqs[0].channels, param_channels=self.param_channels)
        self.checkpoint_ = fit_param_net([samples[i] for i in tr], [samples[i] for i in va], cfg, mcfg)
        self.net_ = self.checkpoint_.build()
        self.n_channels_in_ = seqs[0].channels
        return self

    def predict(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "net_")
        return [param_net_forward(self.net_, s, self.kind).values for s in check_sequences(X)]

    def transform(self, X) -> List[np.ndarray]:
        return self.predict(X)

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean absolute error of the normalized maps."""
        pred = self.predict(X)
        return -float(np.mean([np.mean(np.abs(p - np.asarray(t))) for p, t in zip(pred, y)]))


class DparNetRestorer(BaseEstimator, RegressorMixin):
    """Restore degraded sequences, optionally assisted by parameter maps.

    ``pmaps`` passed to :meth:`fit` and :meth:`predict` take precedence; when
    absent, a fitted ``param_estimator`` supplies them for variants that need one.
    """

    def __init__(self, variant="full", kind="noise", base_channels=64, rdb_count=2, rdb_growth=None,
                 rdb_layers=4, wide_channels=8, lr=1e-4, epochs=100, batch_size=4, crop=256,
                 alpha1=1.0, alpha2=0.0, vgg_weights=None, param_estimator=None,
                 validation_fraction=0.1, random_state=0):
        self.variant = variant
        self.kind = kind
        self.base_channels = base_channels
        self.rdb_count = rdb_count
        self.rdb_growth = rdb_growth
        self.rdb_layers = rdb_layers
        self.wide_channels = wide_channels
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.crop = crop
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.vgg_weights = vgg_weights
        self.param_estimator = param_estimator
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_config(self, channels: int) -> ModelConfig:
        return ModelConfig(base_channels=self.base_channels, rdb_count=self.rdb_count,
                           rdb_growth=self.rdb_growth, rdb_layers=self.rdb_layers,
                           wide_channels=self.wide_channels, in_channels=channels, variant=self.variant)

    def _resolve_pmaps(self, seqs, pmaps):
        kind = DegradationKind(self.kind)
        if pmaps is not None:
            return check_pmaps(pmaps, seqs, kind)
        variant = Variant.parse(self.variant)
        if variant.needs_pmap:
            if self.param_estimator is None:
                raise ValueError(f"variant {variant.value} needs pmaps or a fitted param_estimator")
            return check_pmaps(self.param_estimator.predict(seqs), seqs, kind)
        return [ParamMap(np.zeros(s.spatial_shape, np.float32), kind) for s in seqs]

    def fit(self, X, y, pmaps=None):
        seqs = check_sequences(X)
        clean = check_sequences(y)
        if [s.shape for s in seqs] != [c.shape for c in clean]:
            raise ValueError("degraded and clean sequences differ in shape")
        maps = self._resolve_pmaps(seqs, pmaps)
        samples = _samples(seqs, clean, maps)
        tr, va = _holdout(len(samples), self.validation_fraction, self.random_state)
        cfg = TrainConfig(lr=self.lr, epochs=self.epochs, alpha1=self.alpha1, alpha2=self.alpha2,
                          batch_size=self.batch_size, seed=self.random_state, crop=self.crop,
                          vgg_weights=self.vgg_weights)
        self.checkpoint_: Checkpoint = fit_dparnet(
            [samples[i] for i in tr], [samples[i] for i in va], cfg,
            self._model_config(seqs[0].channels), oracle_pmaps=True)
        self.model_ = self.checkpoint_.build()
        self.n_channels_in_ = seqs[0].channels
        return self

    def predict(self, X, pmaps=None) -> List[np.ndarray]:
        check_is_fitted(self, "model_")
        seqs = check_sequences(X)
        maps = self._resolve_pmaps(seqs, pmaps)
        use = Variant.parse(self.variant).needs_pmap
        return [dparnet_forward(self.model_, s, p if use else None)[0].frames for s, p in zip(seqs, maps)]

    def score(self, X, y, sample_weight=None, pmaps=None) -> float:
        """Mean PSNR (dB) of the restored sequences."""
        pred = self.predict(X, pmaps)
        return float(np.mean([psnr(p, check_sequence(t).frames) for p, t in zip(pred, y)]))
