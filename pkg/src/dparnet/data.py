"""Paired dataset synthesis, manifests, sample loading and augmentation."""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .core import (
    DataIOError,
    DegradationKind,
    ParamMap,
    PathLike,
    Sequence,
    load_sequence,
    read_parammap,
    save_sequence,
    write_parammap,
)
from .degrade import DegradationSpec, degrade, gen_param_map

logger = logging.getLogger(__name__)

TASK_KIND = {"deturbulence": DegradationKind.TURBULENCE, "denoise": DegradationKind.NOISE}
TRAIN_FRAMES = {"deturbulence": 15, "denoise": 7}
MANIFEST_NAME = "manifest.json"
FRAME_PATTERN = "frame_{:05d}.png"


@dataclass
class ManifestEntry:
    seq_id: str
    clean_dir: str
    degraded_dir: str
    pmap_path: str
    num_frames: int
    H: int
    W: int
    C: int


@dataclass
class DatasetManifest:
    root: str
    task: str
    entries: List[ManifestEntry] = field(default_factory=list)
    split: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASK_KIND:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASK_KIND)}")
        self.entries = [e if isinstance(e, ManifestEntry) else ManifestEntry(**e) for e in self.entries]

    @property
    def kind(self) -> DegradationKind:
        return TASK_KIND[self.task]

    def ids(self, split: Optional[str] = None) -> List[str]:
        return [e.seq_id for e in self.entries if split is None or self.split.get(e.seq_id) == split]

    def entry(self, seq_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.seq_id == seq_id:
                return e
        raise KeyError(f"sequence {seq_id!r} is not in the manifest")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False) + "\n"

    def save(self, path: Optional[PathLike] = None) -> Path:
        path = Path(path) if path is not None else Path(self.root) / MANIFEST_NAME
        try:
            path.write_text(self.to_json())
        except OSError as exc:
            raise DataIOError(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path: PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            payload = json.loads(path.read_text())
        except OSError as exc:
            raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
        manifest = cls(**payload)
        # Relative paths inside the manifest resolve against its own directory.
        manifest.root = str(path.parent)
        return manifest


@dataclass
class Sample:
    degraded: Sequence
    clean: Sequence
    pmap: ParamMap
    target_index: int

    def __post_init__(self):
        if self.degraded.shape != self.clean.shape:
            raise ValueError("degraded and clean sequences differ in shape")
        if self.pmap.shape != self.clean.spatial_shape:
            raise ValueError("parameter map is not aligned with the sequence")
        if not 0 <= self.target_index < len(self.clean):
            raise ValueError(f"target_index {self.target_index} out of range")


def assign_splits(seq_ids: List[str], seed: int, test_fraction: float = 0.2,
                  val_fraction: float = 0.1) -> Dict[str, str]:
    """Deterministically partition ids into train/val/test.

    ``val_fraction`` is taken from what remains after the test share.
    """
    n = len(seq_ids)
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED])).permutation(n)
    n_test = int(round(test_fraction * n))
    if n > 1 and test_fraction > 0:
        n_test = min(max(n_test, 1), n - 1)
    n_val = int(round(val_fraction * (n - n_test)))
    split = {}
    for rank, idx in enumerate(order):
        if rank < n_test:
            split[seq_ids[idx]] = "test"
        elif rank < n_test + n_val:
            split[seq_ids[idx]] = "val"
        else:
            split[seq_ids[idx]] = "train"
    return {sid: split[sid] for sid in seq_ids}


def draw_sequence_spec(template: DegradationSpec, rng: np.random.Generator) -> DegradationSpec:
    """Randomize the intensity span and both seeds of ``template`` for one sequence."""
    min_frac = rng.uniform(0.0, 0.5)
    max_frac = rng.uniform(min_frac, 1.0)
    field_seed = int(rng.integers(0, 2**63))
    seed = int(rng.integers(0, 2**63))
    return replace(template.with_field(min_frac=min_frac, max_frac=max_frac, seed=field_seed), seed=seed)


def build_dataset(clean_root: PathLike, task: str, spec_template: DegradationSpec,
                  out_root: PathLike, seed: int, *, test_fraction: float = 0.2,
                  val_fraction: float = 0.1, randomize_span: bool = True,
                  bit_depth: int = 16) -> DatasetManifest:
    """Degrade every clean sequence directory under ``clean_root`` and write a manifest.

    Train and validation sequences are clipped to the task's training length
    (15 frames for deturbulence, 7 for denoising); denoising test sequences are
    clipped too, deturbulence test sequences keep their full length.
    """
    if task not in TASK_KIND:
        raise ValueError(f"unknown task {task!r}")
    if spec_template.kind != TASK_KIND[task]:
        raise ValueError(f"task {task} needs a {TASK_KIND[task].value} degradation spec")
    clean_root = Path(clean_root)
    if not clean_root.is_dir():
        raise DataIOError(f"clean sequence root {clean_root} does not exist")
    seq_dirs = sorted(p for p in clean_root.iterdir() if p.is_dir() and any(p.glob("*.png")))
    if not seq_dirs:
        raise DataIOError(f"no sequence directories with PNG frames under {clean_root}")
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create output directory {out_root}: {exc}") from exc

    ids = [p.name for p in seq_dirs]
    split = assign_splits(ids, seed, test_fraction, val_fraction)
    manifest = DatasetManifest(root=str(out_root), task=task, split=split)
    for index, seq_dir in enumerate(seq_dirs):
        seq_id = seq_dir.name
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        spec = draw_sequence_spec(spec_template, rng) if randomize_span else replace(
            spec_template, seed=int(rng.integers(0, 2**63)))
        clean = load_sequence(seq_dir, seq_id)
        if split[seq_id] != "test" or task == "denoise":
            clean = Sequence(clean.frames[: TRAIN_FRAMES[task]], clean.frame_rate, seq_id)
        H, W = clean.spatial_shape
        pmap = gen_param_map(spec, H, W)
        degraded = degrade(clean, pmap, spec)

        target = out_root / seq_id
        if target.exists():
            shutil.rmtree(target)
        save_sequence(clean, target / "clean", bit_depth)
        save_sequence(degraded, target / "degraded", bit_depth)
        write_parammap(pmap, target / "pmap.pmap")
        manifest.entries.append(ManifestEntry(
            seq_id=seq_id, clean_dir=f"{seq_id}/clean", degraded_dir=f"{seq_id}/degraded",
            pmap_path=f"{seq_id}/pmap.pmap", num_frames=len(clean), H=H, W=W, C=clean.channels,
        ))
        logger.debug("degraded %s (%d frames, split=%s)", seq_id, len(clean), split[seq_id])
    manifest.save()
    return manifest


def load_sample(manifest: DatasetManifest, seq_id: str, target_index: Optional[int] = None) -> Sample:
    """Load one entry; ``target_index`` defaults to the center frame and is clamped."""
    entry = manifest.entry(seq_id)
    root = Path(manifest.root)
    degraded = load_sequence(root / entry.degraded_dir, seq_id)
    clean = load_sequence(root / entry.clean_dir, seq_id)
    pmap = read_parammap(root / entry.pmap_path)
    if len(degraded) != entry.num_frames:
        raise DataIOError(f"{seq_id}: expected {entry.num_frames} frames, found {len(degraded)}")
    if pmap.kind != manifest.kind:
        raise DataIOError(f"{seq_id}: parameter map kind {pmap.kind.value} does not match task {manifest.task}")
    T = len(degraded)
    if target_index is None:
        target_index = T // 2
    target_index = int(min(max(target_index, 0), T - 1))
    return Sample(degraded, clean, pmap, target_index)


def load_split(manifest: DatasetManifest, split: Optional[str] = None) -> List[Sample]:
    return [load_sample(manifest, sid) for sid in manifest.ids(split)]


def crop_size_for(H: int, W: int, crop: int = 256) -> int:
    if H >= crop and W >= crop:
        return crop
    return max(8, (min(H, W) // 8) * 8)


def augment(sample: Sample, seed: int, crop: int = 256) -> Sample:
    """Random crop plus random horizontal/vertical flips, shared by all three arrays."""
    rng = np.random.default_rng(seed)
    H, W = sample.clean.spatial_shape
    size = crop_size_for(H, W, crop)
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    hflip, vflip = bool(rng.integers(0, 2)), bool(rng.integers(0, 2))

    def window(arr, spatial_axis):
        sl = [slice(None)] * arr.ndim
        sl[spatial_axis] = slice(top, top + size)
        sl[spatial_axis + 1] = slice(left, left + size)
        out = arr[tuple(sl)]
        if vflip:
            out = np.flip(out, axis=spatial_axis)
        if hflip:
            out = np.flip(out, axis=spatial_axis + 1)
        return np.ascontiguousarray(out)

    degraded = Sequence(window(sample.degraded.frames, 1), sample.degraded.frame_rate, sample.degraded.id)
    clean = Sequence(window(sample.clean.frames, 1), sample.clean.frame_rate, sample.clean.id)
    pmap = ParamMap(window(sample.pmap.values, 0), sample.pmap.kind, sample.pmap.phys_max)
    return Sample(degraded, clean, pmap, sample.target_index)


def synthetic_sequence(rng: np.random.Generator, T: int, H: int, W: int, C: int = 1,
                       max_speed: float = 1.5) -> np.ndarray:
    """Moving textured geometric shapes over a smooth background, shape ``(T, H, W, C)``.

    Shapes drift at up to ``max_speed`` pixels per frame along each axis.
    """
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    gx, gy = rng.uniform(-0.4, 0.4, size=2)
    base = 0.45 + gx * (xx / W - 0.5) + gy * (yy / H - 0.5)
    # Fixed background texture so that warping has visible structure everywhere.
    freq = rng.uniform(0.15, 0.6, size=2)
    base = base + 0.08 * np.sin(freq[0] * xx + rng.uniform(0, 6.3)) * np.cos(freq[1] * yy)
    color = rng.uniform(0.7, 1.3, size=C) if C == 3 else np.ones(1)
    frames = np.repeat(base[None, :, :, None] * color, T, axis=0)

    for _ in range(int(rng.integers(3, 7))):
        shape_kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0.15, 0.85) * H, rng.uniform(0.15, 0.85) * W
        vy, vx = rng.uniform(-1.0, 1.0, size=2) * max_speed
        size = rng.uniform(0.08, 0.22) * min(H, W)
        level = rng.uniform(0.05, 0.95)
        stripe = rng.uniform(0.3, 1.2)
        tint = rng.uniform(0.8, 1.2, size=C) if C == 3 else np.ones(1)
        for t in range(T):
            py, px = cy + vy * t, cx + vx * t
            if shape_kind == 0:
                mask = (yy - py) ** 2 + (xx - px) ** 2 <= size ** 2
            elif shape_kind == 1:
                mask = (np.abs(yy - py) <= size) & (np.abs(xx - px) <= 0.7 * size)
            else:
                mask = np.abs(yy - py) + np.abs(xx - px) <= 1.2 * size
            texture = level + 0.1 * np.sign(np.sin(stripe * (xx - px)))
            frames[t][mask] = (texture[mask][:, None] * tint)
    return np.clip(frames, 0.0, 1.0)


def make_synthetic_corpus(out_dir: PathLike, n_sequences: int = 8, num_frames: int = 7,
                          H: int = 64, W: int = 64, C: int = 1, seed: int = 0,
                          bit_depth: int = 16, max_speed: float = 1.5) -> List[Path]:
    """Write ``n_sequences`` clean synthetic sequences as PNG directories."""
    out_dir = Path(out_dir)
    paths = []
    for i in range(n_sequences):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i, 0xC0]))
        frames = synthetic_sequence(rng, num_frames, H, W, C, max_speed)
        path = out_dir / f"seq_{i:04d}"
        save_sequence(Sequence(frames, id=path.name), path, bit_depth)
        paths.append(path)
    return paths
