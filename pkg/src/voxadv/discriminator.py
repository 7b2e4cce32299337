"""Voxel-wise feature discriminator: shared MLP trunk + one branch per class.

Labeled voxel features are treated as real, unlabeled as fake. Each feature
vector is routed through the prediction branch of its (ground-truth or
pseudo) class.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .core import DomainError
from .fusion import VoxelFeatureBatch

SCORE_EPS = 1e-7
HIDDEN = 64


class VoxelDiscriminator(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, hidden: int = HIDDEN):
        super().__init__()
        self.num_classes = num_classes
        self.trunk = nn.Sequential(
            nn.Linear(in_channels, hidden),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.branches = nn.ModuleList(
            [nn.Linear(hidden, 1) for _ in range(num_classes)]
        )

    def forward(self, vectors: torch.Tensor, class_ids) -> torch.Tensor:
        """Realness score in (0, 1) per vector, routed by class id."""
        ids = torch.as_tensor(class_ids, dtype=torch.long, device=vectors.device)
        if ids.numel() and int(ids.max()) >= self.num_classes:
            raise DomainError(
                f"class id {int(ids.max())} out of range for K={self.num_classes}"
            )
        h = self.trunk(vectors)
        logits = torch.cat([branch(h) for branch in self.branches], dim=1)
        routed = logits.gather(1, ids[:, None])[:, 0]
        return torch.sigmoid(routed)


def discriminate(disc: VoxelDiscriminator, batch: VoxelFeatureBatch) -> torch.Tensor:
    if batch.is_empty:
        raise DomainError("cannot discriminate an empty batch")
    return disc(batch.vectors, batch.class_ids)


def _clamped_log(scores: torch.Tensor) -> torch.Tensor:
    return torch.log(scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS))


def discriminator_loss(scores_labeled: torch.Tensor,
                       scores_unlabeled: torch.Tensor) -> torch.Tensor:
    """-[mean log s_real + mean log(1 - s_fake)]; minimized by the discriminator."""
    if scores_labeled.numel() == 0 or scores_unlabeled.numel() == 0:
        raise DomainError("need at least one score per group")
    real = _clamped_log(scores_labeled).mean()
    fake = _clamped_log(1.0 - scores_unlabeled).mean()
    return -(real + fake)


def generator_adversarial_loss(scores_unlabeled: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: reward unlabeled features scored real."""
    if scores_unlabeled.numel() == 0:
        raise DomainError("need at least one unlabeled score")
    return -_clamped_log(scores_unlabeled).mean()
