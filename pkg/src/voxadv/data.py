"""Synthetic dataset generation, volume IO, preprocessing and split management.

Volumes and masks live in a minimal self-describing binary container:

    magic   4 bytes  b"VXVL"
    version u32      currently 1
    dtype   u8       0 = float32 (intensities), 1 = int32 (labels)
    dims    3 * u64  H, W, D
    spacing 3 * f64  mm per voxel
    data    raw little-endian voxels, C order
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import DomainError, LabelMask, Volume

VOL_MAGIC = b"VXVL"
VOL_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODES = {np.dtype("float32"): 0, np.dtype("int32"): 1}

MO_WINDOW = (-200.0, 250.0)
MO_TARGET_SHAPE = (128, 128, 64)


# -- container IO -----------------------------------------------------------

def write_grid(path, grid: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    grid = np.ascontiguousarray(grid)
    if grid.dtype == np.float32:
        code = 0
    elif np.issubdtype(grid.dtype, np.integer):
        code = 1
        grid = grid.astype(np.int32)
    else:
        raise DomainError(f"unsupported grid dtype {grid.dtype}")
    if grid.ndim != 3:
        raise DomainError(f"grid must be 3D, got shape {grid.shape}")
    with open(path, "wb") as fh:
        fh.write(VOL_MAGIC)
        fh.write(struct.pack("<IB", VOL_VERSION, code))
        fh.write(struct.pack("<3Q", *grid.shape))
        fh.write(struct.pack("<3d", *spacing))
        fh.write(grid.astype(_DTYPES[code]).tobytes())


def read_grid(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != VOL_MAGIC:
        raise DomainError(f"{path}: not a voxadv volume file")
    version, code = struct.unpack_from("<IB", data, 4)
    if version != VOL_VERSION or code not in _DTYPES:
        raise DomainError(f"{path}: unsupported version/dtype ({version}, {code})")
    dims = struct.unpack_from("<3Q", data, 9)
    spacing = struct.unpack_from("<3d", data, 33)
    n = dims[0] * dims[1] * dims[2]
    grid = np.frombuffer(data, dtype=_DTYPES[code], offset=57, count=n).reshape(dims)
    return grid.astype(_DTYPES[code].newbyteorder("="), copy=False).copy(), spacing


def write_volume(path, volume: Volume):
    write_grid(path, volume.voxels, volume.spacing)


def read_volume(path) -> Volume:
    grid, spacing = read_grid(path)
    return Volume(voxels=grid.astype(np.float32, copy=False), spacing=spacing)


def write_mask(path, mask: LabelMask, spacing=(1.0, 1.0, 1.0)):
    write_grid(path, mask.labels.astype(np.int32), spacing)


def read_mask(path, num_classes: int) -> LabelMask:
    grid, _ = read_grid(path)
    return LabelMask(labels=grid, num_classes=num_classes)


# -- manifest ----------------------------------------------------------------

TRAIN, LABELED, UNLABELED, TEST = "train", "labeled", "unlabeled", "test"


@dataclass
class CaseEntry:
    case_id: str
    volume: str
    mask: Optional[str]
    split: str


@dataclass
class DatasetManifest:
    root: Path
    num_classes: int
    size: int
    seed: int
    cases: List[CaseEntry] = field(default_factory=list)

    def ids(self, *splits) -> List[str]:
        return [c.case_id for c in self.cases if c.split in splits]

    def case(self, case_id: str) -> CaseEntry:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def load_volume(self, case_id: str) -> Volume:
        return read_volume(self.root / self.case(case_id).volume)

    def load_mask(self, case_id: str) -> LabelMask:
        entry = self.case(case_id)
        if entry.mask is None:
            raise DomainError(f"case {case_id} has no mask")
        return read_mask(self.root / entry.mask, self.num_classes)

    def save(self, path=None):
        path = Path(path) if path else self.root / "manifest.json"
        doc = {
            "num_classes": self.num_classes,
            "size": self.size,
            "seed": self.seed,
            "cases": [
                {"id": c.case_id, "volume": c.volume, "mask": c.mask, "split": c.split}
                for c in self.cases
            ],
        }
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        cases = [CaseEntry(c["id"], c["volume"], c["mask"], c["split"])
                 for c in doc["cases"]]
        return cls(root=path.parent, num_classes=doc["num_classes"],
                   size=doc["size"], seed=doc["seed"], cases=cases)


# -- synthetic phantom generation ---------------------------------------------

FG_FRACTION_RANGE = (0.06, 0.16)
NOISE_SIGMA = 0.3
BG_MEAN_RANGE = (0.15, 0.45)
CONTRAST_RANGE = (0.12, 0.3)
ANNOTATION_FLIP_PROB = 0.5
ANNOTATION_BAND = 2


def _make_case(rng: np.random.Generator, size: int, num_classes: int):
    """One phantom: K-1 soft-edged ellipsoids on a noisy background."""
    k = num_classes
    shape = (size, size, size)
    bg_mean = rng.uniform(*BG_MEAN_RANGE)
    labels = np.zeros(shape, dtype=np.int32)
    intensity = np.full(shape, bg_mean, dtype=np.float64)

    frac_total = rng.uniform(*FG_FRACTION_RANGE)
    frac_each = frac_total / (k - 1)
    base_r = (3.0 * frac_each * size ** 3 / (4.0 * math.pi)) ** (1.0 / 3.0)

    grid = np.stack(np.meshgrid(*[np.arange(size)] * 3, indexing="ij"), axis=-1)
    centers = []
    for c in range(1, k):
        radii = base_r * rng.uniform(0.8, 1.25, size=3)
        rmax = radii.max()
        lo, hi = rmax + 1.0, size - rmax - 1.0
        center = None
        for _ in range(64):
            cand = rng.uniform(lo, hi, size=3)
            if all(np.linalg.norm(cand - prev) > 2.0 * base_r for prev in centers):
                center = cand
                break
        if center is None:
            center = rng.uniform(lo, hi, size=3)
        centers.append(center)

        rho = np.sqrt((((grid - center) / radii) ** 2).sum(axis=-1))
        occupancy = rho <= 1.0
        labels[occupancy] = c
        contrast = rng.uniform(*CONTRAST_RANGE)
        soft = 1.0 / (1.0 + np.exp((rho - 1.0) / 0.08))
        intensity += soft * contrast

    intensity += rng.normal(0.0, NOISE_SIGMA, size=shape)
    intensity = np.clip(intensity, 0.0, 1.0).astype(np.float32)
    return intensity, labels


def _shift(mask: np.ndarray, axis: int, step: int) -> np.ndarray:
    out = np.zeros_like(mask)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if step > 0:
        src[axis], dst[axis] = slice(None, -step), slice(step, None)
    else:
        src[axis], dst[axis] = slice(-step, None), slice(None, step)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def _annotation_noise(rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    """Imperfect training annotations: random label flips restricted to a
    narrow band around each object boundary."""
    noisy = labels.copy()
    for c in np.unique(labels):
        if c == 0:
            continue
        region = labels == c
        dilated, eroded = region.copy(), region.copy()
        for _ in range(ANNOTATION_BAND):
            next_d, next_e = dilated.copy(), eroded.copy()
            for axis in range(3):
                for step in (-1, 1):
                    next_d |= _shift(dilated, axis, step)
                    next_e &= _shift(eroded, axis, step)
            dilated, eroded = next_d, next_e
        band = dilated & ~eroded
        flips = band & (rng.random(labels.shape) < ANNOTATION_FLIP_PROB)
        noisy[flips & region] = 0
        noisy[flips & ~region] = c
    return noisy


def generate_synthetic(out_dir, seed: int, n_train: int = 40, n_test: int = 10,
                       size: int = 32, num_classes: int = 2) -> DatasetManifest:
    """Write a deterministic synthetic dataset and its manifest."""
    if size % 8 != 0:
        raise DomainError(f"size must be divisible by 8, got {size}")
    if num_classes < 2:
        raise DomainError(f"num_classes must be >= 2, got {num_classes}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root=out_dir, num_classes=num_classes,
                               size=size, seed=seed)
    for idx in range(n_train + n_test):
        rng = np.random.default_rng([seed, idx])
        intensity, labels = _make_case(rng, size, num_classes)
        # training annotations carry boundary noise; test masks stay clean
        if idx < n_train:
            labels = _annotation_noise(rng, labels)
        case_id = f"case_{idx:03d}"
        vol_name, msk_name = f"{case_id}_vol.vxvl", f"{case_id}_msk.vxvl"
        write_grid(out_dir / vol_name, intensity)
        write_grid(out_dir / msk_name, labels)
        split = TRAIN if idx < n_train else TEST
        manifest.cases.append(CaseEntry(case_id, vol_name, msk_name, split))
    manifest.save()
    return manifest


def make_split(manifest: DatasetManifest, labeled_fraction: float,
               seed: int) -> DatasetManifest:
    """Deterministically assign labeled/unlabeled within the training cases."""
    if not (0 < labeled_fraction <= 1):
        raise DomainError(f"labeled_fraction out of (0,1], got {labeled_fraction}")
    train_ids = manifest.ids(TRAIN, LABELED, UNLABELED)
    n_labeled = math.ceil(labeled_fraction * len(train_ids))
    order = np.random.default_rng(seed).permutation(len(train_ids))
    labeled = {train_ids[i] for i in order[:n_labeled]}
    for c in manifest.cases:
        if c.split in (TRAIN, LABELED, UNLABELED):
            c.split = LABELED if c.case_id in labeled else UNLABELED
    return manifest


# -- preprocessing -------------------------------------------------------------

def _resample(grid: np.ndarray, target_shape, order: str) -> np.ndarray:
    if tuple(grid.shape) == tuple(target_shape):
        return grid
    t = torch.from_numpy(np.ascontiguousarray(grid))[None, None].float()
    mode = "trilinear" if order == "linear" else "nearest"
    kwargs = {"align_corners": False} if mode == "trilinear" else {}
    out = F.interpolate(t, size=tuple(target_shape), mode=mode, **kwargs)
    return out[0, 0].numpy()


def _standardize_to_unit(v: np.ndarray) -> np.ndarray:
    std = v.std()
    if std < 1e-8:
        return np.full_like(v, 0.5)
    z = (v - v.mean()) / std
    zmin, zmax = z.min(), z.max()
    if zmax - zmin < 1e-8:
        return np.full_like(v, 0.5)
    return (z - zmin) / (zmax - zmin)


def preprocess(volume: Volume, preset: str) -> Volume:
    """Dataset-specific intensity pipeline; identity for the synthetic preset."""
    if not np.all(np.isfinite(volume.voxels)):
        bad = int((~np.isfinite(volume.voxels)).sum())
        raise DomainError(f"volume contains {bad} non-finite voxels")
    if preset == "synthetic":
        return volume
    v = volume.voxels.astype(np.float64)
    spacing = volume.spacing
    if preset == "mo":
        v = np.clip(v, *MO_WINDOW)
        in_shape = np.array(v.shape, dtype=np.float64)
        v = _resample(v.astype(np.float32), MO_TARGET_SHAPE, "linear").astype(np.float64)
        scale = in_shape / np.array(MO_TARGET_SHAPE, dtype=np.float64)
        spacing = tuple(float(s * f) for s, f in zip(volume.spacing, scale))
    elif preset != "la":
        raise DomainError(f"unknown preprocessing preset {preset!r}")
    v = _standardize_to_unit(v)
    return Volume(voxels=v.astype(np.float32), spacing=spacing)


def resample_mask(mask: LabelMask, target_shape) -> LabelMask:
    """Nearest-neighbor resampling preserves label integrality."""
    out = _resample(mask.labels.astype(np.float32), target_shape, "nearest")
    return LabelMask(labels=out.astype(np.int64), num_classes=mask.num_classes)
