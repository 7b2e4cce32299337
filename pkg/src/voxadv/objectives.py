"""Dice, consistency, warm-up schedule and the total-loss composition."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch

from .core import DomainError

DICE_EPS = 1e-5
GAMMA_MAX_DEFAULT = 0.001


@dataclass(frozen=True)
class LossReport:
    iteration: int
    dice: float
    consistency: float
    adversarial: float
    feature: float
    gamma_t: float
    alpha: float
    beta: float
    total: float

    CSV_FIELDS = ("iteration", "dice", "consistency", "adversarial", "feature",
                  "gamma_t", "alpha", "beta", "total")

    def csv_row(self) -> str:
        return ",".join(repr(getattr(self, f)) for f in self.CSV_FIELDS)


def soft_dice_loss(pred: torch.Tensor, target_onehot: torch.Tensor) -> torch.Tensor:
    """1 - mean_c (2 sum p_c g_c + eps) / (sum p_c^2 + sum g_c^2 + eps).

    ``pred`` and ``target_onehot`` are (K, H, W, D) or (B, K, H, W, D); the
    sums run over all voxels (and batch), the mean over classes.
    """
    if pred.shape != target_onehot.shape:
        raise DomainError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target_onehot.shape)}")
    class_dim = 0 if pred.ndim == 4 else 1
    sum_dims = tuple(d for d in range(pred.ndim) if d != class_dim)
    inter = (pred * target_onehot).sum(dim=sum_dims)
    denom = (pred ** 2).sum(dim=sum_dims) + (target_onehot ** 2).sum(dim=sum_dims)
    dice = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    return 1.0 - dice.mean()


def consistency_loss(teacher_pred: torch.Tensor, student_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over all entries; teacher treated as constant."""
    if teacher_pred.shape != student_pred.shape:
        raise DomainError(
            f"shape mismatch {tuple(teacher_pred.shape)} vs {tuple(student_pred.shape)}"
        )
    return ((student_pred - teacher_pred.detach()) ** 2).mean()


def consistency_weight(t: int, t_max: int, gamma_max: float = GAMMA_MAX_DEFAULT) -> float:
    """Gaussian warm-up gamma(t) = gamma_max * exp(-5 (1 - t/t_max)^2)."""
    if t_max <= 0:
        raise DomainError(f"t_max must be positive, got {t_max}")
    if not (0 <= t <= t_max):
        raise DomainError(f"iteration {t} out of [0, {t_max}]")
    return gamma_max * math.exp(-5.0 * (1.0 - t / t_max) ** 2)


def total_loss(dice, consistency, adversarial, feature,
               alpha: float, beta: float, gamma_t: float, iteration: int = 0):
    """Compose total = dice + alpha*adv + beta*feature + gamma_t*consistency.

    Accepts tensors or floats; returns (total, LossReport).
    """
    parts = {"dice": dice, "consistency": consistency,
             "adversarial": adversarial, "feature": feature}
    def as_float(v):
        return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

    for name, value in parts.items():
        if not math.isfinite(as_float(value)):
            raise DomainError(f"loss term {name} is not finite: {as_float(value)}")
    total = dice + alpha * adversarial + beta * feature + gamma_t * consistency
    # The logged total is recombined from the logged (float64) parts so the
    # report is self-consistent regardless of tensor precision.
    logged_total = (as_float(dice) + alpha * as_float(adversarial)
                    + beta * as_float(feature) + gamma_t * as_float(consistency))
    report = LossReport(
        iteration=iteration,
        dice=as_float(dice), consistency=as_float(consistency),
        adversarial=as_float(adversarial), feature=as_float(feature),
        gamma_t=float(gamma_t), alpha=float(alpha), beta=float(beta),
        total=logged_total,
    )
    return total, report
