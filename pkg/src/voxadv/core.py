"""Shared domain types, probability utilities and training configuration."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

PROB_SUM_TOL = 1e-5


class DomainError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class Volume:
    """A 3D intensity grid (H, W, D) with physical voxel spacing in mm."""

    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 1:
            raise DomainError(f"volume must be 3D with positive extents, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("volume contains non-finite values")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DomainError(f"spacing must be strictly positive on all axes, got {self.spacing}")
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelMask:
    """Per-voxel integer class assignments plus a validity mask.

    Ground-truth masks are valid everywhere; pseudo-label masks mark
    low-confidence voxels invalid so they are excluded from class routing.
    """

    labels: np.ndarray
    num_classes: int
    valid: np.ndarray = None

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise DomainError(f"labels must be 3D, got shape {lab.shape}")
        if self.num_classes < 2:
            raise DomainError(f"num_classes must be >= 2, got {self.num_classes}")
        lab = lab.astype(np.int64, copy=False)
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise DomainError(
                f"labels must lie in [0, {self.num_classes - 1}], got range "
                f"[{lab.min()}, {lab.max()}]"
            )
        valid = self.valid
        if valid is None:
            valid = np.ones(lab.shape, dtype=bool)
        else:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != lab.shape:
                raise DomainError("valid mask shape must match labels")
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class SoftPrediction:
    """Per-voxel class probability field, channel-first (K, H, W, D)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float32)
        if p.ndim != 4 or p.shape[0] < 2:
            raise DomainError(f"probs must be (K, H, W, D) with K >= 2, got shape {p.shape}")
        if p.size and (p.min() < -PROB_SUM_TOL or p.max() > 1 + PROB_SUM_TOL):
            raise DomainError("probabilities must lie in [0, 1]")
        sums = p.sum(axis=0)
        if p.size and np.abs(sums - 1.0).max() > PROB_SUM_TOL:
            raise DomainError(
                f"per-voxel probabilities must sum to 1 within {PROB_SUM_TOL}, "
                f"worst deviation {np.abs(sums - 1.0).max():.3e}"
            )
        object.__setattr__(self, "probs", p)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.probs.shape[1:]


@dataclass(frozen=True)
class FeaturePyramid:
    """The four encoder feature taps, shallow to deep.

    Level j has spatial extents halved j-1 times relative to the input and a
    channel count that never decreases with depth. Levels are torch tensors
    of shape (C_j, H_j, W_j, D_j).
    """

    levels: Sequence

    def __post_init__(self):
        levels = tuple(self.levels)
        if len(levels) != 4:
            raise DomainError(f"pyramid must have exactly 4 levels, got {len(levels)}")
        prev_c = 0
        base = tuple(int(s) for s in levels[0].shape[1:])
        for j, lvl in enumerate(levels):
            if lvl.ndim != 4:
                raise DomainError(f"level {j + 1} must be (C, H, W, D)")
            c = int(lvl.shape[0])
            if c < prev_c:
                raise DomainError("channel counts must be non-decreasing with depth")
            prev_c = c
            expected = tuple(s // (2 ** j) for s in base)
            if tuple(int(s) for s in lvl.shape[1:]) != expected:
                raise DomainError(
                    f"level {j + 1} spatial size {tuple(lvl.shape[1:])} != expected {expected}"
                )
        object.__setattr__(self, "levels", levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def one_hot_encode(mask: LabelMask, num_classes: int = None) -> SoftPrediction:
    """One-hot a label mask into a (K, H, W, D) probability field."""
    k = num_classes if num_classes is not None else mask.num_classes
    if mask.labels.size and mask.labels.max() >= k:
        raise DomainError(f"label {mask.labels.max()} out of range for K={k}")
    probs = np.zeros((k,) + mask.shape, dtype=np.float32)
    h, w, d = mask.shape
    idx = np.indices(mask.shape)
    probs[mask.labels, idx[0], idx[1], idx[2]] = 1.0
    return SoftPrediction(probs)


def argmax_labels(pred: SoftPrediction) -> LabelMask:
    """Per-voxel argmax; ties break toward the lowest class index."""
    labels = np.argmax(pred.probs, axis=0)
    return LabelMask(labels=labels, num_classes=pred.num_classes)


# -- training configuration ------------------------------------------------

_PRESETS = ("la", "mo", "synthetic")


@dataclass
class TrainConfig:
    """All knobs of a training run; serializes to a flat key=value file."""

    preset: str = "synthetic"
    num_classes: int = 2
    patch_size: int = 32
    base_channels: int = 4
    fused_channels: int = 64
    per_class_cap: int = 256

    alpha: float = 0.01        # adversarial weight
    beta: float = 0.1          # feature (representation) weight
    gamma_max: float = 0.001   # consistency warm-up ceiling
    lambda_ema: float = 0.99
    threshold_t: float = 0.7

    t_max: int = 6000
    batch_labeled: int = 2
    batch_unlabeled: int = 2

    student_optimizer: str = "sgd"  # "sgd" (momentum 0.9, wd 1e-4) or "adam"
    lr_student: float = 0.01
    lr_decay_every: int = 2500
    lr_decay_factor: float = 0.1
    lr_discriminator: float = 2e-4
    disc_steps_per_student_step: int = 1

    seed: int = 0
    checkpoint_iters: str = ""  # comma-separated iterations; final always kept
    labeled_fraction: float = 0.1

    def copy(self, **updates) -> "TrainConfig":
        return dataclasses.replace(self, **updates)


def validate_config(cfg: TrainConfig):
    """Return (cfg, []) when valid, else (None, list of violation strings)."""
    errors = []
    for name in ("alpha", "beta", "gamma_max"):
        v = getattr(cfg, name)
        if not (math.isfinite(v) and v >= 0):
            errors.append(f"{name} must be >= 0, got {v}")
    if not (0 <= cfg.lambda_ema < 1):
        errors.append(f"lambda_ema out of [0,1), got {cfg.lambda_ema}")
    if not (0 <= cfg.threshold_t <= 1):
        errors.append(f"threshold_t out of [0,1], got {cfg.threshold_t}")
    if cfg.t_max < 1:
        errors.append(f"t_max must be >= 1, got {cfg.t_max}")
    if cfg.batch_labeled < 1:
        errors.append(f"batch_labeled must be >= 1, got {cfg.batch_labeled}")
    if cfg.batch_unlabeled < 1:
        errors.append(f"batch_unlabeled must be >= 1, got {cfg.batch_unlabeled}")
    if cfg.num_classes < 2:
        errors.append(f"num_classes must be >= 2, got {cfg.num_classes}")
    if cfg.patch_size < 8 or cfg.patch_size % 8 != 0:
        errors.append(f"patch_size must be a positive multiple of 8, got {cfg.patch_size}")
    if cfg.preset not in _PRESETS:
        errors.append(f"preset must be one of {_PRESETS}, got {cfg.preset!r}")
    if cfg.student_optimizer not in ("sgd", "adam"):
        errors.append(f"student_optimizer must be sgd or adam, got {cfg.student_optimizer!r}")
    if not (0 < cfg.labeled_fraction <= 1):
        errors.append(f"labeled_fraction out of (0,1], got {cfg.labeled_fraction}")
    for name in ("lr_student", "lr_discriminator"):
        if getattr(cfg, name) <= 0:
            errors.append(f"{name} must be > 0, got {getattr(cfg, name)}")
    if errors:
        return None, errors
    return cfg, []


def config_to_text(cfg: TrainConfig) -> str:
    lines = ["# voxadv training configuration"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    """Parse a flat key=value config; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DomainError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in fields:
            raise DomainError(f"line {lineno}: unknown config key {key!r}")
        ftype = fields[key].type
        try:
            if ftype in ("int", int):
                values[key] = int(val)
            elif ftype in ("float", float):
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise DomainError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return TrainConfig(**values)


def preset_config(name: str, **overrides) -> TrainConfig:
    """Config presets matching the published LA/MO recipes plus a desk-scale default."""
    if name == "la":
        cfg = TrainConfig(preset="la", student_optimizer="sgd", lr_student=0.01,
                          alpha=0.01, beta=0.1, t_max=6000, patch_size=112)
    elif name == "mo":
        cfg = TrainConfig(preset="mo", student_optimizer="adam", lr_student=0.001,
                          alpha=0.01, beta=100.0, t_max=6000, num_classes=5, patch_size=96)
    elif name == "synthetic":
        # adversarial weight raised for the desk-scale task, where the small
        # backbone and short schedule need a stronger alignment signal
        cfg = TrainConfig(preset="synthetic", student_optimizer="sgd", lr_student=0.01,
                          alpha=0.3, beta=0.1, t_max=2000, patch_size=32)
    else:
        raise DomainError(f"unknown preset {name!r}")
    return cfg.copy(**overrides)
