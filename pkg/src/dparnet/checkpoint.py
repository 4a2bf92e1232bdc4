"""Checkpoint directories: a JSON config plus one little-endian binary file per weight.

Weight file layout::

    u32 name_length | name (utf-8) | u8 dtype (0 = float32) | u32 rank | u32 dims[rank] | data
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn

from .core import ConfigurationError, DataIOError, FormatError, PathLike
from .models import DparNet, ModelConfig, ParamNet

DTYPE_F32 = 0
CONFIG_NAME = "config.json"
WEIGHTS_DIR = "weights"
OPTIMIZER_NAME = "optimizer.pt"


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: Dict[str, np.ndarray]
    net: str = "dparnet"  # or "param_net"
    task: Optional[str] = None
    epoch: int = 0
    optimizer_state: Optional[bytes] = None
    train_curve: List[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def build(self) -> nn.Module:
        model = build_network(self.net, self.config)
        load_weights(model, self.weights)
        model.eval()
        return model


def build_network(net: str, config: ModelConfig) -> nn.Module:
    if net == "dparnet":
        return DparNet(config)
    if net == "param_net":
        return ParamNet(config.in_channels, config.param_channels)
    raise ConfigurationError(f"unknown network type {net!r}")


def state_to_numpy(model: nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32).copy() for k, v in model.state_dict().items()}


def load_weights(model: nn.Module, weights: Dict[str, np.ndarray]) -> None:
    """Load ``weights`` strictly: every name present and every shape identical."""
    expected = model.state_dict()
    missing = sorted(set(expected) - set(weights))
    unexpected = sorted(set(weights) - set(expected))
    if missing or unexpected:
        raise ConfigurationError(
            f"checkpoint does not match model config: missing={missing[:5]} unexpected={unexpected[:5]}")
    for name, tensor in expected.items():
        if tuple(weights[name].shape) != tuple(tensor.shape):
            raise ConfigurationError(
                f"weight {name}: checkpoint shape {tuple(weights[name].shape)} != model shape {tuple(tensor.shape)}")
    model.load_state_dict({k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in weights.items()})


def encode_array(name: str, array: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(array, dtype="<f4", order="C")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_array(blob: bytes, source: str = "<bytes>"):
    try:
        (name_len,) = struct.unpack_from("<I", blob, 0)
        offset = 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        dtype, rank = struct.unpack_from("<BI", blob, offset)
        offset += 5
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: malformed weight header ({exc})") from exc
    if dtype != DTYPE_F32:
        raise FormatError(f"{source}: unsupported dtype code {dtype}")
    count = int(np.prod(dims)) if rank else 1
    if len(blob) - offset != 4 * count:
        raise FormatError(f"{source}: expected {4 * count} data bytes, found {len(blob) - offset}")
    data = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)
    return name, data


def _weight_filename(index: int, name: str) -> str:
    return f"{index:04d}_{name}.bin"


def save_checkpoint(ckpt: Checkpoint, directory: PathLike) -> Path:
    directory = Path(directory)
    try:
        wdir = directory / WEIGHTS_DIR
        wdir.mkdir(parents=True, exist_ok=True)
        for old in wdir.glob("*.bin"):
            old.unlink()
        for i, (name, array) in enumerate(ckpt.weights.items()):
            (wdir / _weight_filename(i, name)).write_bytes(encode_array(name, array))
        meta = {
            "net": ckpt.net,
            "task": ckpt.task,
            "epoch": ckpt.epoch,
            "model": ckpt.config.to_dict(),
            "train_curve": ckpt.train_curve,
            "extra": ckpt.extra,
        }
        (directory / CONFIG_NAME).write_text(json.dumps(meta, indent=2) + "\n")
        opt_path = directory / OPTIMIZER_NAME
        if ckpt.optimizer_state is not None:
            opt_path.write_bytes(ckpt.optimizer_state)
        elif opt_path.exists():
            opt_path.unlink()
    except OSError as exc:
        raise DataIOError(f"cannot write checkpoint to {directory}: {exc}") from exc
    return directory


def load_checkpoint(directory: PathLike) -> Checkpoint:
    directory = Path(directory)
    config_path = directory / CONFIG_NAME
    try:
        meta = json.loads(config_path.read_text())
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint config {config_path}: {exc}") from exc
    config = ModelConfig(**meta["model"])
    weights = {}
    for path in sorted((directory / WEIGHTS_DIR).glob("*.bin")):
        name, data = decode_array(path.read_bytes(), str(path))
        weights[name] = data
    opt_path = directory / OPTIMIZER_NAME
    ckpt = Checkpoint(
        config=config, weights=weights, net=meta["net"], task=meta.get("task"),
        epoch=meta.get("epoch", 0),
        optimizer_state=opt_path.read_bytes() if opt_path.exists() else None,
        train_curve=meta.get("train_curve", []), extra=meta.get("extra", {}),
    )
    # Shape validation happens here so a mismatched config never loads partially.
    load_weights(build_network(ckpt.net, config), weights)
    return ckpt


def optimizer_blob(optimizer: torch.optim.Optimizer) -> bytes:
    buf = io.BytesIO()
    torch.save(optimizer.state_dict(), buf)
    return buf.getvalue()
