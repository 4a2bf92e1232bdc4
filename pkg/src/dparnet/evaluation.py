"""Sequence evaluation, temporal-stability profiles and efficiency benchmarking."""
from __future__ import annotations

import datetime as _dt
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
import torch

from .checkpoint import Checkpoint
from .core import ConfigurationError, DataIOError, PathLike, Sequence, save_frame, save_sequence
from .data import DatasetManifest, load_sample
from .metrics import HIGHER_IS_BETTER, METRICS
from .models import DparNet, count_flops, count_params, dparnet_forward, with_channels

BENCH_SHAPE = (256, 256, 3)
METRIC_NAMES = ("psnr", "ssim", "nrmse", "vi")


def report_timestamp() -> str:
    """UTC timestamp, pinned by ``SOURCE_DATE_EPOCH`` when set for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
            else _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0))
    return when.isoformat()


@dataclass
class MetricsReport:
    per_sequence: List[dict]
    task: str
    model_id: str
    timestamp: str = field(default_factory=report_timestamp)
    aggregate: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate_rows(self.per_sequence)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        try:
            path.write_text(self.to_json())
        except OSError as exc:
            raise DataIOError(f"cannot write report {path}: {exc}") from exc
        return path


def aggregate_rows(rows: List[dict]) -> dict:
    if not rows:
        return {m: float("nan") for m in METRIC_NAMES}
    return {m: float(np.mean([r[m] for r in rows])) for m in METRIC_NAMES}


@dataclass
class EfficiencyReport:
    params_millions: float
    flops_e10: float
    time_s: float
    shape: tuple = BENCH_SHAPE
    rounds: int = 100

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def save(self, path: PathLike) -> Path:
        Path(path).write_text(self.to_json())
        return Path(path)


def format_table(rows: List[dict], label: str = "Model", columns=METRIC_NAMES) -> str:
    """Aligned console table with up/down arrows marking the better direction."""
    arrows = {True: "↑", False: "↓"}
    headers = [label] + [f"{c.upper()} ({arrows[HIGHER_IS_BETTER[c]]})" if c in HIGHER_IS_BETTER else c
                         for c in columns]
    body = [[str(r[label.lower()] if label.lower() in r else r.get("name", ""))] +
            [f"{r[c]:.4f}" if isinstance(r.get(c), float) else str(r.get(c, "")) for c in columns]
            for r in rows]
    widths = [max(len(h), *(len(line[i]) for line in body)) if body else len(h) for i, h in enumerate(headers)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*headers), "-" * (sum(widths) + 2 * (len(widths) - 1))]
    lines += [fmt.format(*line) for line in body]
    return "\n".join(lines)


def sequence_metrics(restored: Sequence, clean: Sequence) -> dict:
    """Per-frame metrics averaged over the sequence."""
    if restored.shape != clean.shape:
        raise ValueError(f"restored {restored.shape} and clean {clean.shape} differ in shape")
    per_frame = {m: [METRICS[m](r, c) for r, c in zip(restored.frames, clean.frames)] for m in METRIC_NAMES}
    return {m: float(np.mean(v)) for m, v in per_frame.items()}


def temporal_profile(seq: Sequence, column_index: int) -> np.ndarray:
    """Stack column ``column_index`` of every frame as the rows of a ``(T, H)`` image."""
    W = seq.spatial_shape[1]
    if not 0 <= column_index < W:
        raise IndexError(f"column {column_index} outside frame width {W}")
    profile = seq.frames[:, :, column_index, :]
    return profile[..., 0] if profile.shape[-1] == 1 else profile


def profile_jitter(seq: Sequence, column_index: int) -> float:
    """Mean absolute difference between consecutive rows of the temporal profile."""
    profile = temporal_profile(seq, column_index).astype(np.float64)
    if profile.shape[0] < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(profile, axis=0))))


Restorer = Callable[[Sequence], Sequence]


def make_restorer(model_ckpt: Checkpoint, param_ckpt: Optional[Checkpoint] = None,
                  oracle_pmaps: bool = False) -> Callable:
    """Build ``(sample) -> (restored, pmap)`` for a DparNet checkpoint."""
    model = model_ckpt.build()
    param_net = param_ckpt.build() if param_ckpt is not None else None
    if model.variant.needs_pmap and param_net is None and not oracle_pmaps:
        raise ConfigurationError(
            f"variant {model.variant.value} needs a parameter-network checkpoint or oracle maps")

    def restore(sample):
        pmap = sample.pmap if oracle_pmaps else None
        return dparnet_forward(model, sample.degraded, pmap, param_net, sample.pmap.kind)

    return restore


def evaluate(model: Union[Checkpoint, Restorer], manifest: DatasetManifest, split: str = "test",
             param_ckpt: Optional[Checkpoint] = None, oracle_pmaps: bool = False,
             out_dir: Optional[PathLike] = None, profile_column: Optional[int] = None,
             model_id: Optional[str] = None) -> MetricsReport:
    """Restore every sequence in ``split`` and score it against the clean ground truth.

    ``model`` is a restoration checkpoint or any callable mapping a degraded
    :class:`Sequence` to a restored one.
    """
    ids = manifest.ids(split)
    if not ids:
        raise ConfigurationError(f"split {split!r} is empty")
    if isinstance(model, Checkpoint):
        if model.task is not None and model.task != manifest.task:
            raise ConfigurationError(f"checkpoint task {model.task} does not match manifest task {manifest.task}")
        restore = make_restorer(model, param_ckpt, oracle_pmaps)
        model_id = model_id or model.config.variant.value
    else:
        restore = lambda sample: (model(sample.degraded), None)  # noqa: E731
        model_id = model_id or getattr(model, "__name__", "callable")

    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    for seq_id in ids:
        sample = load_sample(manifest, seq_id)
        restored, _ = restore(sample)
        rows.append({"seq_id": seq_id, **sequence_metrics(restored, sample.clean)})
        if out_dir is not None:
            save_sequence(restored, out_dir / "restored" / seq_id)
            if profile_column is not None:
                col = min(profile_column, sample.clean.spatial_shape[1] - 1)
                for name, seq in (("degraded", sample.degraded), ("restored", restored), ("clean", sample.clean)):
                    save_frame(temporal_profile(seq, col), out_dir / "profiles" / seq_id / f"{name}.png")
    report = MetricsReport(per_sequence=rows, task=manifest.task, model_id=model_id)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save(out_dir / "metrics.json")
    return report


def benchmark_efficiency(model_ckpt: Union[Checkpoint, DparNet], rounds: int = 100, warmup: int = 10,
                         shape=BENCH_SHAPE) -> EfficiencyReport:
    """Parameter count, FLOPs and mean forward time for one frame of ``shape``.

    Counts and timing use the checkpoint's architecture rebuilt for the channel
    count of ``shape``, so every model is measured on the same frame size.
    """
    config = model_ckpt.config
    H, W, C = shape
    model = DparNet(with_channels(config, C)).eval()
    params = count_params(model)
    flops = count_flops(model, H, W, C)
    frames = torch.rand(1, 1, C, H, W, generator=torch.Generator().manual_seed(0))
    pmap = torch.rand(1, 1, H, W, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        for _ in range(warmup):
            model(frames, pmap)
        times = []
        for _ in range(rounds):
            start = time.perf_counter()
            model(frames, pmap)
            times.append(time.perf_counter() - start)
    return EfficiencyReport(params / 1e6, flops / 1e10, float(np.mean(times)), tuple(shape), rounds)
