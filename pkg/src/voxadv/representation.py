"""Voxel-wise representation heads and the normalized-MSE feature loss.

Student features pass through projection then prediction; teacher features
pass through the teacher's (EMA) projection only and never receive
gradients.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .core import DomainError
from .fusion import VoxelFeatureBatch

NORM_EPS = 1e-12
HIDDEN = 64


def _mlp(cin, cout, hidden=HIDDEN):
    return nn.Sequential(
        nn.Linear(cin, hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, cout),
    )


class ProjectionHead(nn.Module):
    def __init__(self, in_channels: int, out_channels: int = HIDDEN):
        super().__init__()
        self.net = _mlp(in_channels, out_channels)

    def forward(self, x):
        return self.net(x)


class RepresentationHeads(nn.Module):
    """Student projection + prediction, and the EMA teacher projection."""

    def __init__(self, in_channels: int, width: int = HIDDEN):
        super().__init__()
        self.student_projection = ProjectionHead(in_channels, width)
        self.student_prediction = ProjectionHead(width, width)
        self.teacher_projection = ProjectionHead(in_channels, width)
        self.teacher_projection.load_state_dict(self.student_projection.state_dict())
        for p in self.teacher_projection.parameters():
            p.requires_grad_(False)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + NORM_EPS)


def feature_loss(student_vecs: torch.Tensor, teacher_vecs: torch.Tensor) -> torch.Tensor:
    """mean_i || normalize(p(z_s,i)) - normalize(z_t,i) ||^2, teacher constant."""
    if student_vecs.shape != teacher_vecs.shape:
        raise DomainError(
            f"paired shapes differ: {tuple(student_vecs.shape)} vs {tuple(teacher_vecs.shape)}"
        )
    if student_vecs.numel() == 0:
        raise DomainError("feature loss needs at least one pair")
    s = l2_normalize(student_vecs)
    t = l2_normalize(teacher_vecs.detach())
    return ((s - t) ** 2).sum(dim=-1).mean()


def representation_forward(heads: RepresentationHeads,
                           student_batch: VoxelFeatureBatch,
                           teacher_batch: VoxelFeatureBatch):
    """Run both paths over position-aligned voxel feature batches."""
    if len(student_batch) != len(teacher_batch) or not np.array_equal(
            student_batch.positions, teacher_batch.positions):
        raise DomainError("student and teacher batches must sample the same voxels")
    student_out = heads.student_prediction(heads.student_projection(student_batch.vectors))
    with torch.no_grad():
        teacher_out = heads.teacher_projection(teacher_batch.vectors)
    return student_out, teacher_out
