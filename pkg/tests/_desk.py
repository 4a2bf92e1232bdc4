"""Desk-scale corpora and training helpers shared by the slow and acceptance tests."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List

import numpy as np

from dparnet.core import Sequence, SmoothFieldSpec
from dparnet.data import (
    DatasetManifest,
    Sample,
    build_dataset,
    draw_sequence_spec,
    load_split,
    make_synthetic_corpus,
    synthetic_sequence,
)
from dparnet.degrade import DegradationSpec, degrade, gen_param_map
from dparnet.models import ModelConfig
from dparnet.train import TrainConfig, fit_dparnet, fit_param_net

DESK_MODEL = dict(base_channels=16, rdb_growth=16, rdb_layers=3, wide_channels=8, param_channels=16)
DESK_LR = 1e-3


def desk_model(variant="full", in_channels=1) -> ModelConfig:
    return ModelConfig(variant=variant, in_channels=in_channels, **DESK_MODEL)


def desk_train(epochs: int, crop: int, seed: int = 0, **kw) -> TrainConfig:
    return TrainConfig(lr=DESK_LR, epochs=epochs, alpha2=0.0, batch_size=4, crop=crop, seed=seed, **kw)


def in_memory_samples(n: int, seed: int, task: str = "denoise", size: int = 64, frames: int = 7,
                      length_scale: float = 16.0, constant_sigma=None) -> List[Sample]:
    """Synthetic degraded/clean/parameter triples without touching disk.

    ``constant_sigma`` (a list of sigma_n values) yields spatially constant noise maps.
    """
    kind = "noise" if task == "denoise" else "turbulence"
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i, 0x5A]))
        clean = Sequence(synthetic_sequence(rng, frames, size, size, 1), id=f"s{i}")
        if constant_sigma is not None:
            u = constant_sigma[i % len(constant_sigma)] / 100.0
            spec = DegradationSpec(kind, SmoothFieldSpec(length_scale, u, u, 0), seed=int(rng.integers(2**62)))
        else:
            spec = draw_sequence_spec(DegradationSpec(kind, SmoothFieldSpec(length_scale)), rng)
        pmap = gen_param_map(spec, size, size)
        out.append(Sample(degrade(clean, pmap, spec), clean, pmap, frames // 2))
    return out


def build_corpus(root: Path, task: str, n: int, size: int, frames: int, seed: int,
                 length_scale: float = 16.0, val_fraction: float = 0.1,
                 max_speed: float = 1.5) -> DatasetManifest:
    clean_dir = Path(root) / "clean"
    make_synthetic_corpus(clean_dir, n, frames, size, size, 1, seed=seed, max_speed=max_speed)
    kind = "noise" if task == "denoise" else "turbulence"
    template = DegradationSpec(kind, SmoothFieldSpec(length_scale))
    return build_dataset(clean_dir, task, template, Path(root) / "ds", seed, val_fraction=val_fraction)


def run_ablation(manifest: DatasetManifest, variants, seeds, epochs: int, crop: int,
                 param_epochs: int = 30) -> Dict[str, List[float]]:
    """Train every variant for every seed with identical budgets; returns best val PSNRs."""
    train = load_split(manifest, "train")
    val = load_split(manifest, "val")
    param_ckpt = fit_param_net(train, val, desk_train(param_epochs, crop), desk_model(), manifest.task)
    results: Dict[str, List[float]] = {}
    for variant in variants:
        for seed in seeds:
            ckpt = fit_dparnet(train, val, desk_train(epochs, crop, seed), desk_model(variant),
                               param_ckpt, task=manifest.task)
            results.setdefault(variant, []).append(ckpt.extra["best_val_psnr"])
    return results
