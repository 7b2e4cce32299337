"""Multiresolution feature fusion and voxel-wise feature sampling.

The four encoder taps are each projected to a common channel width with a
1x1x1 convolution, upsampled (trilinear) to the full patch resolution,
summed, and passed through one convolution to give the fused grid shared by
the discriminator and the representation head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DomainError, LabelMask

LABELED = "labeled"
UNLABELED = "unlabeled"


@dataclass(frozen=True)
class FusedFeatureGrid:
    """Fused voxel-wise feature grid, (C, H, W, D)."""

    features: torch.Tensor

    def __post_init__(self):
        if self.features.ndim != 4:
            raise DomainError(f"fused grid must be (C, H, W, D), got {tuple(self.features.shape)}")

    @property
    def channels(self) -> int:
        return int(self.features.shape[0])

    @property
    def shape(self):
        return tuple(int(s) for s in self.features.shape[1:])


@dataclass(frozen=True)
class VoxelFeatureBatch:
    """Sampled per-voxel feature vectors with class ids, domain tags and positions."""

    vectors: torch.Tensor      # (N, C); keeps the autograd graph of its source grid
    class_ids: np.ndarray      # (N,) int64
    domains: np.ndarray        # (N,) unicode, "labeled" | "unlabeled"
    positions: np.ndarray      # (N, 3) int64 voxel coordinates

    def __post_init__(self):
        n = int(self.vectors.shape[0])
        if not (len(self.class_ids) == len(self.domains) == len(self.positions) == n):
            raise DomainError("batch fields must have equal length")

    def __len__(self):
        return int(self.vectors.shape[0])

    @property
    def is_empty(self) -> bool:
        return len(self) == 0


class FeatureFusion(nn.Module):
    """Project + upsample + sum + convolve the encoder pyramid.

    Projections carry no bias, so an all-zero pyramid maps to the fusing
    convolution's bias field exactly.
    """

    def __init__(self, tap_channels: Sequence[int], fused_channels: int = 64):
        super().__init__()
        self.fused_channels = fused_channels
        self.projections = nn.ModuleList(
            [nn.Conv3d(c, fused_channels, 1, bias=False) for c in tap_channels]
        )
        self.out_conv = nn.Conv3d(fused_channels, fused_channels, 1)

    def projected_sum(self, taps: Sequence[torch.Tensor], out_size) -> torch.Tensor:
        total = None
        for proj, tap in zip(self.projections, taps):
            p = proj(tap)
            if tuple(p.shape[-3:]) != tuple(out_size):
                p = F.interpolate(p, size=tuple(out_size), mode="trilinear",
                                  align_corners=False)
            total = p if total is None else total + p
        return total

    def forward(self, taps: Sequence[torch.Tensor], out_size=None) -> torch.Tensor:
        if len(taps) != len(self.projections):
            raise DomainError(f"expected {len(self.projections)} pyramid levels, got {len(taps)}")
        if out_size is None:
            out_size = tuple(taps[0].shape[-3:])
        return self.out_conv(self.projected_sum(taps, out_size))


def resize_and_fuse(fuser: FeatureFusion, pyramid) -> FusedFeatureGrid:
    """Single-volume fusion over a FeaturePyramid (levels are (C, H, W, D))."""
    taps = [lvl[None] for lvl in pyramid]
    return FusedFeatureGrid(fuser(taps)[0])


def _trilinear_gather(tap: torch.Tensor, positions: np.ndarray, full_size) -> torch.Tensor:
    """Values of ``tap`` (C, h, w, d) trilinearly upsampled to ``full_size``,
    read at integer voxel ``positions`` of the full-resolution grid.

    Matches F.interpolate(mode="trilinear", align_corners=False) exactly at
    the sampled voxels.
    """
    vals = None
    idx = [None, None, None]
    for axis in range(3):
        size = tap.shape[1 + axis]
        scale = size / full_size[axis]
        src = (positions[:, axis] + 0.5) * scale - 0.5
        src = np.clip(src, 0.0, size - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, size - 1)
        w1 = src - i0
        idx[axis] = (i0, i1, torch.from_numpy(w1).to(tap.dtype))
    out = 0.0
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                wx = idx[0][2] if bx else 1.0 - idx[0][2]
                wy = idx[1][2] if by else 1.0 - idx[1][2]
                wz = idx[2][2] if bz else 1.0 - idx[2][2]
                w = (wx * wy * wz)
                corner = tap[:, idx[0][bx], idx[1][by], idx[2][bz]]
                out = out + corner * w[None, :]
    return out  # (C, N)


def fused_features_at(fuser: FeatureFusion, taps, positions: np.ndarray) -> torch.Tensor:
    """Fused feature vectors at full-resolution voxel positions, computed
    sparsely. Exactly equivalent (up to float rounding) to reading the dense
    ``forward`` grid at those positions; used by the trainer to avoid
    materializing full fused grids. ``taps`` are single-volume (C, h, w, d).
    """
    full_size = tuple(int(s) for s in taps[0].shape[1:])
    total = None
    for proj, tap in zip(fuser.projections, taps):
        gathered = _trilinear_gather(tap, positions, full_size)  # (C_j, N)
        w = proj.weight.view(proj.weight.shape[0], -1)           # (C, C_j)
        p = w @ gathered
        total = p if total is None else total + p
    w_out = fuser.out_conv.weight.view(fuser.fused_channels, -1)
    out = w_out @ total + fuser.out_conv.bias[:, None]
    return out.T  # (N, C)


def sample_class_positions(mask: LabelMask, per_class_cap: int, seed):
    """Positions and class ids of a per-class uniform sample of valid voxels."""
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(mask.num_classes):
        pos = np.argwhere((mask.labels == c) & mask.valid)
        if len(pos) == 0:
            continue
        take = min(per_class_cap, len(pos))
        idx = rng.choice(len(pos), size=take, replace=False)
        idx.sort()
        chosen.append((c, pos[idx]))
    if not chosen:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    class_ids = np.concatenate([np.full(len(p), c, dtype=np.int64) for c, p in chosen])
    positions = np.concatenate([p for _, p in chosen]).astype(np.int64)
    return class_ids, positions


def sample_voxel_features(grid: FusedFeatureGrid, mask: LabelMask,
                          per_class_cap: int, seed, domain: str = LABELED) -> VoxelFeatureBatch:
    """Uniformly sample up to ``per_class_cap`` valid voxels per present class.

    Deterministic for a fixed seed. Returns an empty batch when no voxel is
    valid; the caller decides whether to skip the step.
    """
    if mask.shape != grid.shape:
        raise DomainError(f"mask shape {mask.shape} != grid shape {grid.shape}")
    if domain not in (LABELED, UNLABELED):
        raise DomainError(f"domain must be {LABELED!r} or {UNLABELED!r}")
    class_ids, positions = sample_class_positions(mask, per_class_cap, seed)
    if len(class_ids) == 0:
        feats = grid.features.new_zeros((0, grid.channels))
        return VoxelFeatureBatch(feats, class_ids, np.zeros(0, dtype="<U9"), positions)
    vectors = grid.features[:, positions[:, 0], positions[:, 1], positions[:, 2]].T
    domains = np.full(len(class_ids), domain, dtype="<U9")
    return VoxelFeatureBatch(vectors, class_ids, domains, positions)
