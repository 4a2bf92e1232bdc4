"""Losses and optimization loops for the parameter network and the restoration network."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint, optimizer_blob, state_to_numpy
from .core import ConfigurationError, DataIOError, NumericalError, ParamMap, PathLike
from .data import DatasetManifest, Sample, augment, load_split
from .metrics import psnr
from .models import (
    DparNet,
    ModelConfig,
    ParamNet,
    Variant,
    param_net_forward,
    pmap_tensor,
    sequence_tensor,
)

logger = logging.getLogger(__name__)

# End index (exclusive) of each named activation inside torchvision's vgg19().features.
VGG19_LAYERS = {"relu1_2": 4, "relu2_2": 9, "relu3_3": 16, "relu3_4": 18, "relu4_4": 27, "relu5_4": 36}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    alpha1: float = 1.0
    alpha2: float = 0.05
    batch_size: int = 4
    seed: int = 0
    crop: int = 256
    val_every: int = 1
    vgg_weights: Optional[str] = None
    perceptual_layer: str = "relu3_3"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.val_every < 1:
            raise ConfigurationError("epochs, batch_size and val_every must be positive")
        if self.perceptual_layer not in VGG19_LAYERS:
            raise ConfigurationError(f"unknown perceptual layer {self.perceptual_layer!r}")


class VGGFeatureExtractor(nn.Module):
    """Frozen VGG-19 trunk up to ``layer``; gray inputs are replicated to RGB."""

    def __init__(self, weights: Union[str, Path, dict, None], layer: str = "relu3_3"):
        super().__init__()
        from torchvision.models import vgg19

        if weights is None:
            raise ConfigurationError(
                "perceptual loss needs pre-trained VGG-19 weights; pass a state-dict path, "
                "'imagenet', or set alpha2 = 0")
        if isinstance(weights, str) and weights == "imagenet":
            from torchvision.models import VGG19_Weights

            try:
                net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
            except Exception as exc:  # download or cache failure
                raise ConfigurationError(f"cannot obtain ImageNet VGG-19 weights: {exc}") from exc
        else:
            net = vgg19(weights=None)
            state = weights
            if not isinstance(weights, dict):
                path = Path(weights)
                if not path.is_file():
                    raise ConfigurationError(f"VGG-19 weight file {path} does not exist")
                state = torch.load(path, map_location="cpu", weights_only=True)
            if not any(k.startswith("features.") for k in state):
                state = {f"features.{k}": v for k, v in state.items()}
            try:
                net.load_state_dict(state, strict=False)
            except RuntimeError as exc:
                raise ConfigurationError(f"VGG-19 weights do not fit the architecture: {exc}") from exc
            missing = [k for k in net.state_dict() if k.startswith("features.") and k not in state]
            if missing:
                raise ConfigurationError(f"VGG-19 weights lack convolution tensors, e.g. {missing[0]}")
        self.features = net.features[: VGG19_LAYERS[layer]].eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def train(self, mode: bool = True):
        super().train(mode)
        self.features.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.features(x)


def _check_pair(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")


def pixel_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_pair(pred, gt)
    return (pred - gt).abs().mean()


def perceptual_loss(pred: torch.Tensor, gt: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    _check_pair(pred, gt)
    if pred.dim() == 3:
        pred, gt = pred[None], gt[None]
    with torch.no_grad():
        target = extractor(gt)
    return (extractor(pred) - target).abs().mean()


def total_loss(pred: torch.Tensor, gt: torch.Tensor, cfg: TrainConfig,
               extractor: Optional[nn.Module] = None) -> torch.Tensor:
    loss = cfg.alpha1 * pixel_loss(pred, gt)
    if cfg.alpha2 > 0:
        if extractor is None:
            raise ConfigurationError("alpha2 > 0 requires a perceptual feature extractor")
        loss = loss + cfg.alpha2 * perceptual_loss(pred, gt, extractor)
    return loss


def make_extractor(cfg: TrainConfig) -> Optional[VGGFeatureExtractor]:
    if cfg.alpha2 <= 0:
        return None
    return VGGFeatureExtractor(cfg.vgg_weights, cfg.perceptual_layer)


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def _stack(samples: List[Sample]):
    """Group augmented samples into tensors; samples must share shape and target index."""
    frames = torch.cat([sequence_tensor(s.degraded) for s in samples])
    clean = torch.cat([sequence_tensor(s.clean) for s in samples])
    pmaps = torch.cat([pmap_tensor(s.pmap) for s in samples])
    return frames, clean, pmaps


def _groups(samples: List[Sample]):
    groups: Dict[tuple, List[Sample]] = {}
    for s in samples:
        groups.setdefault((s.degraded.shape, s.target_index), []).append(s)
    return list(groups.values())


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss during {where}")


def with_pmap(sample: Sample, pmap: ParamMap) -> Sample:
    return Sample(sample.degraded, sample.clean, pmap, sample.target_index)


def fit_param_net(train: List[Sample], val: List[Sample], cfg: TrainConfig,
                  model_cfg: ModelConfig, task: Optional[str] = None) -> Checkpoint:
    """Adam on mean |P_hat - P|; keeps the weights with the lowest validation MAE."""
    if not train:
        raise ConfigurationError("training split is empty")
    val = val or train
    torch.manual_seed(cfg.seed)
    net = ParamNet(model_cfg.in_channels, model_cfg.param_channels)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA11]))
    kind = train[0].pmap.kind

    def val_mae() -> float:
        errs = [np.mean(np.abs(param_net_forward(net, s.degraded, kind).values - s.pmap.values)) for s in val]
        return float(np.mean(errs))

    init_mae = val_mae()
    best = (init_mae, state_to_numpy(net), 0)
    curve = []
    logger.info("param_net init val_mae %.6f", init_mae)
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        losses = []
        for idx in _batches(rng.permutation(len(train)), cfg.batch_size):
            crops = [augment(train[i], int(rng.integers(0, 2**63)), cfg.crop) for i in idx]
            optimizer.zero_grad()
            batch_loss = 0.0
            for group in _groups(crops):
                frames, _, target = _stack(group)
                loss = (net(frames) - target).abs().mean() * len(group) / len(crops)
                _check_finite(loss, f"parameter network epoch {epoch}")
                loss.backward()
                batch_loss += float(loss.detach())
            optimizer.step()
            losses.append(batch_loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            row["val_mae"] = val_mae()
            if row["val_mae"] < best[0]:
                best = (row["val_mae"], state_to_numpy(net), epoch)
        curve.append(row)
        logger.info("param_net epoch %d loss %.6f val_mae %s", epoch, row["loss"], row.get("val_mae"))
    return Checkpoint(
        config=replace(model_cfg), weights=best[1], net="param_net", task=task, epoch=best[2],
        optimizer_state=optimizer_blob(optimizer), train_curve=curve,
        extra={"train": asdict(cfg), "init_val_mae": init_mae, "best_val_mae": best[0]},
    )


@torch.no_grad()
def validation_psnr(model: DparNet, samples: List[Sample]) -> float:
    """Mean PSNR of the restored target frame over ``samples`` (full resolution, clipped)."""
    model.eval()
    scores = []
    for s in samples:
        out = model(sequence_tensor(s.degraded), pmap_tensor(s.pmap), targets=[s.target_index])
        pred = out[0, 0].clamp(0, 1).numpy().transpose(1, 2, 0)
        scores.append(psnr(pred, s.clean.frames[s.target_index]))
    return float(np.mean(scores))


def resolve_pmaps(samples: List[Sample], variant: Variant, param_net: Optional[ParamNet],
                  oracle: bool) -> List[Sample]:
    """Attach the parameter map each variant trains with.

    Variants that need P use the frozen parameter network's prediction unless
    ``oracle`` is set, in which case the ground-truth maps are kept.
    """
    if not variant.needs_pmap or oracle:
        return samples
    if param_net is None:
        raise ConfigurationError(
            f"variant {variant.value} needs a parameter-network checkpoint or oracle parameter maps")
    return [with_pmap(s, param_net_forward(param_net, s.degraded, s.pmap.kind)) for s in samples]


def fit_dparnet(train: List[Sample], val: List[Sample], cfg: TrainConfig, model_cfg: ModelConfig,
                param_ckpt: Optional[Checkpoint] = None, oracle_pmaps: bool = False,
                task: Optional[str] = None,
                on_epoch: Optional[Callable[[dict], None]] = None) -> Checkpoint:
    if not train:
        raise ConfigurationError("training split is empty")
    val = val or train
    variant = model_cfg.variant
    param_net = param_ckpt.build() if param_ckpt is not None else None
    train = resolve_pmaps(train, variant, param_net, oracle_pmaps)
    val = resolve_pmaps(val, variant, param_net, oracle_pmaps)
    extractor = make_extractor(cfg)

    torch.manual_seed(cfg.seed)
    model = DparNet(model_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD4]))

    best = (-math.inf, state_to_numpy(model), 0)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses = []
        for idx in _batches(rng.permutation(len(train)), cfg.batch_size):
            crops = [augment(train[i], int(rng.integers(0, 2**63)), cfg.crop) for i in idx]
            optimizer.zero_grad()
            batch_loss = 0.0
            for group in _groups(crops):
                frames, clean, pmaps = _stack(group)
                t = group[0].target_index
                pred = model(frames, pmaps, targets=[t])[:, 0]
                loss = total_loss(pred, clean[:, t], cfg, extractor) * len(group) / len(crops)
                _check_finite(loss, f"restoration network epoch {epoch}")
                loss.backward()
                batch_loss += float(loss.detach())
            optimizer.step()
            losses.append(batch_loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            row["val_psnr"] = validation_psnr(model, val)
            if row["val_psnr"] > best[0]:
                best = (row["val_psnr"], state_to_numpy(model), epoch)
        curve.append(row)
        logger.info("%s epoch %d loss %.6f val_psnr %s", variant.value, epoch, row["loss"], row.get("val_psnr"))
        if on_epoch is not None:
            on_epoch(row)
    return Checkpoint(
        config=replace(model_cfg), weights=best[1], net="dparnet", task=task, epoch=best[2],
        optimizer_state=optimizer_blob(optimizer), train_curve=curve,
        extra={"train": asdict(cfg), "oracle_pmaps": oracle_pmaps, "best_val_psnr": best[0]},
    )


def train_param_net(manifest: DatasetManifest, cfg: TrainConfig,
                    model_cfg: Optional[ModelConfig] = None) -> Checkpoint:
    train = load_split(manifest, "train")
    if not train:
        raise ConfigurationError("manifest has no training sequences")
    model_cfg = model_cfg or ModelConfig(in_channels=train[0].clean.channels)
    return fit_param_net(train, load_split(manifest, "val"), cfg, model_cfg, manifest.task)


def train_dparnet(manifest: DatasetManifest, cfg: TrainConfig, variant, model_cfg: Optional[ModelConfig] = None,
                  param_ckpt: Optional[Checkpoint] = None, oracle_pmaps: bool = False) -> Checkpoint:
    variant = Variant.parse(variant)
    if variant.needs_pmap and param_ckpt is None and not oracle_pmaps:
        raise ConfigurationError(
            f"variant {variant.value} needs a parameter-network checkpoint or oracle parameter maps")
    train = load_split(manifest, "train")
    if not train:
        raise ConfigurationError("manifest has no training sequences")
    model_cfg = replace(model_cfg or ModelConfig(in_channels=train[0].clean.channels), variant=variant)
    return fit_dparnet(train, load_split(manifest, "val"), cfg, model_cfg, param_ckpt,
                       oracle_pmaps, manifest.task)


def write_curve(curve: List[dict], path: PathLike) -> Path:
    """Write a training curve as CSV with columns epoch, loss and the validation metric."""
    path = Path(path)
    columns = ["epoch", "loss"] + sorted({k for row in curve for k in row} - {"epoch", "loss"})
    try:
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            for row in curve:
                writer.writerow(row)
    except OSError as exc:
        raise DataIOError(f"cannot write curve file {path}: {exc}") from exc
    return path


def read_curve(path: PathLike) -> List[dict]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataIOError(f"cannot read curve file {path}: {exc}") from exc
    return [{k: (float(v) if v not in ("", None) else None) for k, v in row.items()} for row in rows]
