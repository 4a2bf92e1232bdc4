"""Forward degradation operators: spatially varying noise and a turbulence surrogate.

The turbulence model is a smooth random backward warp followed by a spatially
variant Gaussian blur, both scaled linearly by the normalized parameter map.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .core import (
    DegradationKind,
    ParamMap,
    Sequence,
    SmoothFieldSpec,
    PHYS_MAX,
    smooth_random_field,
)

BLUR_LEVELS = 4


@dataclass(frozen=True)
class DegradationSpec:
    kind: DegradationKind
    field: SmoothFieldSpec = field(default_factory=SmoothFieldSpec)
    seed: int = 0
    max_disp: float = 4.0
    max_blur_sigma: float = 2.0
    warp_scale: float = 12.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DegradationKind(self.kind))
        if self.max_disp < 0 or self.max_blur_sigma < 0:
            raise ValueError("max_disp and max_blur_sigma must be non-negative")
        if not self.warp_scale > 0:
            raise ValueError("warp_scale must be positive")

    def with_field(self, **changes) -> "DegradationSpec":
        return replace(self, field=replace(self.field, **changes))


def _frame_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))


def _require_kind(pmap: ParamMap, kind: DegradationKind) -> None:
    if pmap.kind != kind:
        raise ValueError(f"expected a {kind.value} parameter map, got {pmap.kind.value}")


def _require_shape(seq: Sequence, pmap: ParamMap) -> None:
    if seq.spatial_shape != pmap.shape:
        raise ValueError(
            f"sequence frames are {seq.spatial_shape} but parameter map is {pmap.shape}"
        )


def gen_param_map(spec: DegradationSpec, H: int, W: int) -> ParamMap:
    values = smooth_random_field(spec.field, H, W)
    return ParamMap(values.astype(np.float32), spec.kind, PHYS_MAX[spec.kind])


def apply_noise(clean: Sequence, pmap: ParamMap, seed: int) -> Sequence:
    """Add zero-mean Gaussian noise whose per-pixel std is ``pmap.phys / 255``.

    Every frame ``t`` draws from its own generator seeded by ``(seed, t)``, and the
    result is clipped to ``[0, 1]``.
    """
    _require_kind(pmap, DegradationKind.NOISE)
    _require_shape(clean, pmap)
    sigma = (pmap.phys / 255.0)[:, :, None]
    out = np.empty_like(clean.frames)
    for t, frame in enumerate(clean.frames):
        noise = _frame_rng(seed, t).standard_normal(frame.shape) * sigma
        out[t] = np.clip(frame + noise, 0.0, 1.0)
    return Sequence(out, clean.frame_rate, clean.id)


def _unit_field(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    smooth = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="reflect")
    smooth -= smooth.mean()
    peak = np.abs(smooth).max()
    return smooth / peak if peak > 0 else smooth


def gen_displacement(pmap: ParamMap, spec: DegradationSpec, t: int):
    """Per-frame displacement ``(dx, dy)`` in pixels, bounded by ``max_disp * pmap``."""
    _require_kind(pmap, DegradationKind.TURBULENCE)
    rng = _frame_rng(spec.seed, t, 0xD15)
    strength = spec.max_disp * pmap.values.astype(np.float64)
    dx = _unit_field(rng, pmap.shape, spec.warp_scale) * strength
    dy = _unit_field(rng, pmap.shape, spec.warp_scale) * strength
    return dx, dy


def warp_frame(frame: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward bilinear warp with edge clamping: ``out(y, x) = in(y + dy, x + dx)``."""
    H, W = dx.shape
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    y = np.clip(yy + dy, 0, H - 1)
    x = np.clip(xx + dx, 0, W - 1)
    y0 = np.minimum(np.floor(y).astype(np.intp), H - 2 if H > 1 else 0)
    x0 = np.minimum(np.floor(x).astype(np.intp), W - 2 if W > 1 else 0)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (y - y0)[:, :, None]
    wx = (x - x0)[:, :, None]
    img = frame.astype(np.float64)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bottom = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def variant_blur(frame: np.ndarray, sigma_frac: np.ndarray, max_sigma: float) -> np.ndarray:
    """Blur with per-pixel std ``max_sigma * sigma_frac`` by blending uniformly blurred copies."""
    frame = frame.astype(np.float64)
    stack = [frame]
    for k in range(1, BLUR_LEVELS):
        sigma = max_sigma * k / (BLUR_LEVELS - 1)
        stack.append(ndimage.gaussian_filter(frame, (sigma, sigma, 0), mode="nearest"))
    pos = np.clip(sigma_frac.astype(np.float64), 0.0, 1.0) * (BLUR_LEVELS - 1)
    lower = np.minimum(np.floor(pos).astype(np.intp), BLUR_LEVELS - 2)
    w = (pos - lower)[:, :, None]
    copies = np.stack(stack)
    rows, cols = np.indices(sigma_frac.shape)
    return copies[lower, rows, cols] * (1 - w) + copies[lower + 1, rows, cols] * w


def apply_turbulence(clean: Sequence, pmap: ParamMap, spec: DegradationSpec) -> Sequence:
    _require_kind(pmap, DegradationKind.TURBULENCE)
    _require_shape(clean, pmap)
    out = np.empty_like(clean.frames)
    for t, frame in enumerate(clean.frames):
        dx, dy = gen_displacement(pmap, spec, t)
        warped = warp_frame(frame, dx, dy)
        blurred = variant_blur(warped, pmap.values, spec.max_blur_sigma)
        out[t] = np.clip(blurred, 0.0, 1.0)
    return Sequence(out, clean.frame_rate, clean.id)


def degrade(clean: Sequence, pmap: ParamMap, spec: DegradationSpec) -> Sequence:
    """Dispatch to the operator matching ``spec.kind``."""
    if spec.kind == DegradationKind.NOISE:
        return apply_noise(clean, pmap, spec.seed)
    return apply_turbulence(clean, pmap, spec)
