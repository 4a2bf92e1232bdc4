"""Parameter prediction network and the wide & deep restoration network.

Tensors follow ``(N, T, C, H, W)`` for sequences and ``(N, 1, H, W)`` for
parameter maps.  The deep model runs at half resolution: one stride-2
encoder, a bidirectional recurrent feature extractor built from residual
dense blocks, and a reconstructor that fuses five neighbouring feature maps.
The wide model sees the target frame and the parameter map at full
resolution and is two orders of magnitude smaller.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence as Seq, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils._python_dispatch import TorchDispatchMode

from .core import ConfigurationError, DegradationKind, ParamMap, PHYS_MAX, Sequence

FUSION_WINDOW = 5


class Variant(str, enum.Enum):
    FULL = "full"
    V1_DEEP_ONLY = "v1_deep_only"
    V2_PARAM_AS_INPUT = "v2_param_as_input"
    V3_WIDE_NO_PARAM = "v3_wide_no_param"

    @classmethod
    def parse(cls, value) -> "Variant":
        aliases = {"v1": cls.V1_DEEP_ONLY, "v2": cls.V2_PARAM_AS_INPUT, "v3": cls.V3_WIDE_NO_PARAM}
        if isinstance(value, cls):
            return value
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            raise ConfigurationError(
                f"unknown variant {value!r}; expected full, v1, v2, v3 or {[v.value for v in cls]}"
            ) from None

    @property
    def uses_wide(self) -> bool:
        return self in (Variant.FULL, Variant.V3_WIDE_NO_PARAM)

    @property
    def needs_pmap(self) -> bool:
        return self in (Variant.FULL, Variant.V2_PARAM_AS_INPUT)


@dataclass
class ModelConfig:
    base_channels: int = 64
    rdb_count: int = 2
    rdb_growth: Optional[int] = None  # None -> base_channels // 2
    rdb_layers: int = 4
    wide_channels: int = 8
    fusion_window: int = FUSION_WINDOW
    in_channels: int = 1
    variant: Variant = Variant.FULL
    param_channels: int = 32

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.fusion_window != FUSION_WINDOW:
            raise ConfigurationError(f"fusion_window is fixed at {FUSION_WINDOW}")
        if self.in_channels not in (1, 3):
            raise ConfigurationError("in_channels must be 1 or 3")
        for name in ("base_channels", "rdb_count", "growth", "rdb_layers",
                     "wide_channels", "param_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")

    @property
    def growth(self) -> int:
        return self.rdb_growth if self.rdb_growth is not None else max(1, self.base_channels // 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class ResidualDenseBlock(nn.Module):
    def __init__(self, channels: int, growth: int, layers: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels + i * growth, growth, 3, 1, 1) for i in range(layers)
        )
        self.fusion = nn.Conv2d(channels + layers * growth, channels, 1)

    def forward(self, x):
        features = x
        for conv in self.convs:
            features = torch.cat((features, F.relu(conv(features))), dim=1)
        return x + self.fusion(features)


class RecurrentCell(nn.Module):
    """``h_t = RDBs(conv(cat(e_t, h_{t-1})))``."""

    def __init__(self, channels: int, rdb_count: int, growth: int, layers: int):
        super().__init__()
        self.merge = nn.Conv2d(2 * channels, channels, 3, 1, 1)
        self.blocks = nn.Sequential(
            *[ResidualDenseBlock(channels, growth, layers) for _ in range(rdb_count)]
        )

    def forward(self, encoded, hidden):
        return self.blocks(F.relu(self.merge(torch.cat((encoded, hidden), dim=1))))


class BRNN(nn.Module):
    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        ch = cfg.base_channels
        self.channels = ch
        self.encode = nn.Conv2d(in_channels, ch, 3, 2, 1)
        self.forward_cell = RecurrentCell(ch, cfg.rdb_count, cfg.growth, cfg.rdb_layers)
        self.backward_cell = RecurrentCell(ch, cfg.rdb_count, cfg.growth, cfg.rdb_layers)
        self.fuse = nn.Conv2d(2 * ch, ch, 3, 1, 1)

    def forward(self, frames: torch.Tensor) -> List[torch.Tensor]:
        N, T, C, H, W = frames.shape
        encoded = F.relu(self.encode(frames.reshape(N * T, C, H, W)))
        encoded = encoded.reshape(N, T, self.channels, *encoded.shape[-2:])
        zero = encoded.new_zeros((N, self.channels, *encoded.shape[-2:]))

        forward_states, hidden = [], zero
        for t in range(T):
            hidden = self.forward_cell(encoded[:, t], hidden)
            forward_states.append(hidden)
        backward_states, hidden = [None] * T, zero
        for t in reversed(range(T)):
            hidden = self.backward_cell(encoded[:, t], hidden)
            backward_states[t] = hidden
        return [self.fuse(torch.cat((f, b), dim=1)) for f, b in zip(forward_states, backward_states)]


class Reconstructor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.base_channels
        self.window = cfg.fusion_window
        self.fuse = nn.Conv2d(self.window * ch, ch, 1)
        self.body = nn.Sequential(ResBlock(ch), ResBlock(ch))
        self.up = nn.ConvTranspose2d(ch, ch, 4, 2, 1)
        self.out = nn.Conv2d(ch, cfg.in_channels, 3, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, features: Seq[torch.Tensor]) -> torch.Tensor:
        if len(features) != self.window:
            raise ValueError(f"reconstructor needs exactly {self.window} feature maps, got {len(features)}")
        x = self.body(F.relu(self.fuse(torch.cat(tuple(features), dim=1))))
        return self.out(F.relu(self.up(x)))


def neighbor_indices(t: int, T: int, window: int = FUSION_WINDOW) -> List[int]:
    """Frame indices fused for target ``t``; out-of-range neighbours replicate the nearest edge."""
    half = window // 2
    return [min(max(t + k, 0), T - 1) for k in range(-half, half + 1)]


class DeepModel(nn.Module):
    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        self.brnn = BRNN(in_channels, cfg)
        self.reconstructor = Reconstructor(cfg)


class WideModel(nn.Module):
    """Shallow full-resolution branch fed with ``cat(I_t, P)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.wide_channels
        self.down = nn.Conv2d(cfg.in_channels + 1, w, 3, 2, 1)
        self.conv = nn.Conv2d(w, w, 3, 1, 1)
        self.res = ResBlock(w)
        self.up = nn.ConvTranspose2d(w, w, 4, 2, 1)
        self.out = nn.Conv2d(w, cfg.in_channels, 3, 1, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, target: torch.Tensor, pmap: torch.Tensor) -> torch.Tensor:
        if target.shape[-2:] != pmap.shape[-2:]:
            raise ValueError(f"frame {tuple(target.shape[-2:])} and parameter map "
                             f"{tuple(pmap.shape[-2:])} are not aligned")
        x = F.relu(self.down(torch.cat((target, pmap), dim=1)))
        x = self.res(F.relu(self.conv(x)))
        return self.out(F.relu(self.up(x)))


class Merge(nn.Module):
    """1x1 convolution over ``cat(y1, y2)``, initialised to the branch average."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, 1)
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.bias.zero_()
            for c in range(channels):
                self.conv.weight[c, c] = 0.5
                self.conv.weight[c, channels + c] = 0.5

    def forward(self, y1, y2):
        if y1.shape != y2.shape:
            raise ValueError(f"branch outputs differ in shape: {tuple(y1.shape)} vs {tuple(y2.shape)}")
        return self.conv(torch.cat((y1, y2), dim=1))


def _pad_to(x: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, int, int]:
    H, W = x.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph or pw:
        shape = x.shape
        flat = x.reshape(-1, *shape[-3:]) if x.dim() > 4 else x
        flat = F.pad(flat, (0, pw, 0, ph), mode="reflect")
        x = flat.reshape(*shape[:-2], H + ph, W + pw)
    return x, H, W


class DparNet(nn.Module):
    """Wide & deep restoration network and its ablation variants."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        variant = config.variant
        deep_in = config.in_channels + (1 if variant == Variant.V2_PARAM_AS_INPUT else 0)
        self.deep = DeepModel(deep_in, config)
        self.wide = WideModel(config) if variant.uses_wide else None
        self.merge = Merge(config.in_channels) if variant.uses_wide else None

    @property
    def variant(self) -> Variant:
        return self.config.variant

    def brnn_extract(self, frames: torch.Tensor, pmap: Optional[torch.Tensor] = None) -> List[torch.Tensor]:
        if self.variant == Variant.V2_PARAM_AS_INPUT:
            extra = pmap[:, None].expand(-1, frames.shape[1], -1, -1, -1)
            frames = torch.cat((frames, extra), dim=2)
        return self.deep.brnn(frames)

    def reconstruct_frame(self, features: Seq[torch.Tensor]) -> torch.Tensor:
        return self.deep.reconstructor(features)

    def forward(self, frames: torch.Tensor, pmap: Optional[torch.Tensor] = None,
                targets: Optional[Seq[int]] = None) -> torch.Tensor:
        """Restore the ``targets`` frames (default: all) of ``frames``; returns ``(N, len(targets), C, H, W)``."""
        N, T, C, H, W = frames.shape
        if self.variant == Variant.V3_WIDE_NO_PARAM:
            pmap = frames.new_ones((N, 1, H, W))
        elif self.variant.needs_pmap and pmap is None:
            raise ConfigurationError(f"variant {self.variant.value} requires a parameter map")
        frames, H0, W0 = _pad_to(frames, 2)
        if pmap is not None:
            pmap, _, _ = _pad_to(pmap, 2)

        features = self.brnn_extract(frames, pmap)
        targets = range(T) if targets is None else targets
        restored = []
        for t in targets:
            target = frames[:, t]
            y = target + self.reconstruct_frame([features[i] for i in neighbor_indices(t, T)])
            if self.wide is not None:
                y = self.merge(y, target + self.wide(target, pmap))
            restored.append(y)
        return torch.stack(restored, dim=1)[..., :H0, :W0]


def temporal_pool(frames: torch.Tensor) -> torch.Tensor:
    """Per-pixel temporal mean and standard deviation, concatenated on channels."""
    mean = frames.mean(dim=1)
    std = (frames - mean[:, None]).pow(2).mean(dim=1).clamp_min(1e-12).sqrt()
    return torch.cat((mean, std), dim=1)


class ParamNet(nn.Module):
    """Encoder-decoder mapping temporally pooled frames to a ``[0, 1]`` parameter map."""

    def __init__(self, in_channels: int = 1, channels: int = 32):
        super().__init__()
        c1, c2, c3 = channels, 2 * channels, 4 * channels
        self.down = nn.ModuleList([
            nn.Conv2d(2 * in_channels, c1, 3, 2, 1), nn.Conv2d(c1, c2, 3, 2, 1), nn.Conv2d(c2, c3, 3, 2, 1),
        ])
        self.body = nn.Sequential(ResBlock(c3), ResBlock(c3))
        self.up = nn.ModuleList([
            nn.ConvTranspose2d(c3, c2, 4, 2, 1), nn.ConvTranspose2d(c2, c1, 4, 2, 1),
            nn.ConvTranspose2d(c1, 1, 4, 2, 1),
        ])

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x, H, W = _pad_to(temporal_pool(frames), 8)
        for conv in self.down:
            x = F.relu(conv(x))
        x = self.body(x)
        for i, deconv in enumerate(self.up):
            x = deconv(x)
            if i < len(self.up) - 1:
                x = F.relu(x)
        return torch.sigmoid(x)[..., :H, :W]


def build_model(config: ModelConfig) -> DparNet:
    return DparNet(config)


def sequence_tensor(seq: Sequence) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(seq.frames.transpose(0, 3, 1, 2)))[None]


def pmap_tensor(pmap: ParamMap) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pmap.values))[None, None]


@torch.no_grad()
def param_net_forward(net: ParamNet, degraded: Sequence, kind) -> ParamMap:
    net.eval()
    values = net(sequence_tensor(degraded))[0, 0].numpy()
    kind = DegradationKind(kind)
    return ParamMap(np.clip(values, 0.0, 1.0), kind, PHYS_MAX[kind])


@torch.no_grad()
def dparnet_forward(model: DparNet, degraded: Sequence, pmap: Optional[ParamMap] = None,
                    param_net: Optional[ParamNet] = None, kind=DegradationKind.NOISE):
    """Restore a whole sequence; returns ``(restored, pmap_used)``.

    A missing parameter map is predicted by ``param_net`` when the variant needs one.
    """
    model.eval()
    if pmap is None and model.variant.needs_pmap:
        if param_net is None:
            raise ConfigurationError(
                f"variant {model.variant.value} needs a parameter map or a parameter network")
        pmap = param_net_forward(param_net, degraded, kind)
    if pmap is not None and pmap.shape != degraded.spatial_shape:
        raise ValueError("parameter map is not aligned with the sequence")
    p = pmap_tensor(pmap) if pmap is not None else None
    out = model(sequence_tensor(degraded), p)[0].clamp(0.0, 1.0)
    restored = Sequence(out.numpy().transpose(0, 2, 3, 1), degraded.frame_rate, degraded.id)
    return restored, pmap


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


_ELEMENTWISE = {
    "add", "add_", "sub", "sub_", "mul", "mul_", "div", "div_", "relu", "relu_",
    "sigmoid", "clamp", "clamp_", "mean", "threshold_backward",
}


class _FlopCounter(TorchDispatchMode):
    def __init__(self):
        super().__init__()
        self.total = 0

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        name = func.overloadpacket.__name__
        if name == "convolution":
            x, weight, bias = args[0], args[1], args[2]
            transposed = args[6]
            kernel = int(np.prod(weight.shape[2:]))
            if transposed:
                macs = x.numel() * weight.shape[1] * kernel
            else:
                macs = out.numel() * weight.shape[1] * kernel
            self.total += 2 * macs + (out.numel() if bias is not None else 0)
        elif name in _ELEMENTWISE:
            self.total += out.numel() if name != "mean" else args[0].numel()
        return out


@torch.no_grad()
def count_flops(model: DparNet, H: int, W: int, C: Optional[int] = None) -> int:
    """Floating point operations to restore one ``H x W x C`` frame.

    Convolutions count ``2 * MACs`` plus bias adds; elementwise ops count one per
    output element.  The parameter network is excluded.
    """
    C = model.config.in_channels if C is None else C
    if C != model.config.in_channels:
        raise ValueError(f"model expects {model.config.in_channels} channels, got {C}")
    was_training = model.training
    model.eval()
    frames = torch.zeros(1, 1, C, H, W)
    pmap = torch.zeros(1, 1, H, W)
    counter = _FlopCounter()
    with counter:
        model(frames, pmap)
    model.train(was_training)
    return counter.total


def with_channels(config: ModelConfig, in_channels: int) -> ModelConfig:
    return replace(config, in_channels=in_channels)
