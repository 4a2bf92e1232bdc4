"""Shared domain types, smooth random fields and file formats.

Frames are float arrays shaped ``(H, W, C)`` with values in ``[0, 1]``.
A :class:`Sequence` stacks them into ``(T, H, W, C)``.
"""
from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import cv2
import numpy as np
from scipy import ndimage

PathLike = Union[str, os.PathLike]

MIN_MODEL_SIZE = 64

PMAP_MAGIC = b"PMAP"
PMAP_VERSION = 1
_PMAP_HEADER = struct.Struct("<4sBBHdII")


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class DataIOError(OSError):
    """A file or directory could not be read or written."""


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""


class DegradationKind(str, enum.Enum):
    TURBULENCE = "turbulence"
    NOISE = "noise"


# Physical value represented by a normalized parameter of 1.0.
PHYS_MAX = {
    DegradationKind.TURBULENCE: 6e-12,  # Cn^2
    DegradationKind.NOISE: 100.0,  # sigma_n on the 0-255 scale
}

_KIND_CODES = {DegradationKind.TURBULENCE: 0, DegradationKind.NOISE: 1}


def as_frame(data) -> np.ndarray:
    """Return ``data`` as a float32 ``(H, W, C)`` frame, adding a channel axis if needed."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"frame must be (H, W) or (H, W, C) with C in {{1, 3}}, got {arr.shape}")
    return arr


@dataclass
class Sequence:
    """Temporally ordered frames of identical shape."""

    frames: np.ndarray
    frame_rate: Optional[float] = None
    id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4 or frames.shape[0] < 1 or frames.shape[3] not in (1, 3):
            raise ValueError(f"sequence must be (T, H, W, C) with T >= 1, got {frames.shape}")
        self.frames = frames

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, t: int) -> np.ndarray:
        return self.frames[t]

    @property
    def shape(self) -> tuple:
        return self.frames.shape

    @property
    def spatial_shape(self) -> tuple:
        return self.frames.shape[1:3]

    @property
    def channels(self) -> int:
        return self.frames.shape[3]


@dataclass
class ParamMap:
    """Per-pixel normalized degradation parameter with its physical scale."""

    values: np.ndarray
    kind: DegradationKind
    phys_max: float = field(default=None)

    def __post_init__(self):
        self.kind = DegradationKind(self.kind)
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError(f"parameter map must be 2-D, got shape {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("parameter map values must lie in [0, 1]")
        self.values = values
        if self.phys_max is None:
            self.phys_max = PHYS_MAX[self.kind]
        self.phys_max = float(self.phys_max)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def phys(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.phys_max


@dataclass(frozen=True)
class SmoothFieldSpec:
    length_scale: float = 16.0
    min_frac: float = 0.0
    max_frac: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.length_scale >= 1.0:
            raise ValueError(f"length_scale must be >= 1 pixel, got {self.length_scale}")
        if not 0.0 <= self.min_frac <= self.max_frac <= 1.0:
            raise ValueError(
                f"need 0 <= min_frac <= max_frac <= 1, got {self.min_frac}, {self.max_frac}"
            )


def smooth_random_field(spec: SmoothFieldSpec, H: int, W: int) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to span ``[min_frac, max_frac]``.

    The result is a pure function of ``(spec, H, W)``.
    """
    if H <= 0 or W <= 0:
        raise ValueError(f"field dimensions must be positive, got {H}x{W}")
    if H < 8 or W < 8:
        raise ValueError(f"field dimensions must be at least 8x8, got {H}x{W}")
    span = spec.max_frac - spec.min_frac
    if span == 0.0:
        return np.full((H, W), spec.min_frac, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    smooth = ndimage.gaussian_filter(rng.standard_normal((H, W)), spec.length_scale, mode="reflect")
    lo, hi = smooth.min(), smooth.max()
    unit = (smooth - lo) / (hi - lo)
    return np.clip(spec.min_frac + unit * span, spec.min_frac, spec.max_frac)


def load_frame(path: PathLike) -> np.ndarray:
    """Read an 8- or 16-bit grayscale/RGB PNG into a ``[0, 1]`` frame."""
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"cannot read frame: {path} does not exist")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataIOError(f"cannot decode image file {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DataIOError(f"unsupported bit depth ({raw.dtype}) in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        elif raw.shape[2] != 3:
            raise DataIOError(f"unsupported channel count {raw.shape[2]} in {path}")
        raw = raw[:, :, ::-1]
    return as_frame(raw.astype(np.float64) / scale)


def save_frame(frame, path: PathLike, bit_depth: int = 16) -> None:
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    frame = as_frame(frame)
    maxval = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(frame.astype(np.float64), 0.0, 1.0) * maxval)
    q = q.astype(np.uint8 if bit_depth == 8 else np.uint16)
    q = q[:, :, 0] if q.shape[2] == 1 else np.ascontiguousarray(q[:, :, ::-1])
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        ok = cv2.imwrite(str(path), q)
    except (OSError, cv2.error) as exc:
        raise DataIOError(f"cannot write frame to {path}: {exc}") from exc
    if not ok:
        raise DataIOError(f"cannot write frame to {path}")


def load_sequence(directory: PathLike, seq_id: Optional[str] = None) -> Sequence:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataIOError(f"sequence directory {directory} does not exist")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise DataIOError(f"no PNG frames in {directory}")
    frames = np.stack([load_frame(p) for p in paths])
    return Sequence(frames, id=seq_id if seq_id is not None else directory.name)


def save_sequence(seq: Sequence, directory: PathLike, bit_depth: int = 16) -> None:
    directory = Path(directory)
    for t, frame in enumerate(seq.frames):
        save_frame(frame, directory / f"frame_{t:05d}.png", bit_depth=bit_depth)


def write_parammap(pmap: ParamMap, path: PathLike) -> None:
    H, W = pmap.shape
    header = _PMAP_HEADER.pack(
        PMAP_MAGIC, PMAP_VERSION, _KIND_CODES[pmap.kind], 0, pmap.phys_max, H, W
    )
    body = np.ascontiguousarray(pmap.values, dtype="<f4").tobytes()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + body)
    except OSError as exc:
        raise DataIOError(f"cannot write parameter map to {path}: {exc}") from exc


def read_parammap(path: PathLike) -> ParamMap:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read parameter map {path}: {exc}") from exc
    if len(blob) < _PMAP_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, kind_code, _reserved, phys_max, H, W = _PMAP_HEADER.unpack_from(blob)
    if magic != PMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {PMAP_MAGIC.decode()!r}")
    if version != PMAP_VERSION:
        raise FormatError(f"{path}: unsupported PMAP version {version}")
    kinds = {code: kind for kind, code in _KIND_CODES.items()}
    if kind_code not in kinds:
        raise FormatError(f"{path}: unknown kind code {kind_code}")
    expected = _PMAP_HEADER.size + 4 * H * W
    if len(blob) != expected:
        raise FormatError(
            f"{path}: header declares {H}x{W} ({expected} bytes) but file has {len(blob)} bytes"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=_PMAP_HEADER.size).reshape(H, W)
    return ParamMap(values.astype(np.float32), kinds[kind_code], phys_max)
