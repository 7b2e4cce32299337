"""EMA coupling between student and teacher, and pseudo-label generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .core import DomainError, LabelMask, SoftPrediction


@dataclass
class ModelPair:
    """Student modules and their EMA teacher shadows (backbone, fusion, projection).

    The teacher side never receives gradient updates; it tracks the student
    through ``ema_update`` only.
    """

    student: "dict[str, nn.Module]"
    teacher: "dict[str, nn.Module]"

    def __post_init__(self):
        if set(self.student) != set(self.teacher):
            raise DomainError("student and teacher must shadow the same module set")
        for name in self.student:
            s = dict(self.student[name].state_dict())
            t = dict(self.teacher[name].state_dict())
            if set(s) != set(t):
                raise DomainError(f"module {name}: mismatched parameter names")
            for key in s:
                if s[key].shape != t[key].shape:
                    raise DomainError(f"module {name}.{key}: shape mismatch")
        for module in self.teacher.values():
            for p in module.parameters():
                p.requires_grad_(False)


def make_model_pair(student_modules: dict) -> ModelPair:
    """Teacher starts as an exact copy of the student."""
    import copy

    teacher = {name: copy.deepcopy(module) for name, module in student_modules.items()}
    return ModelPair(student=student_modules, teacher=teacher)


def ema_update_tensors(teacher_tensors, student_tensors, decay: float):
    """theta_t <- decay * theta_t + (1 - decay) * theta_s, in place."""
    if not (0 <= decay < 1):
        raise DomainError(f"EMA decay must lie in [0, 1), got {decay}")
    for t, s in zip(teacher_tensors, student_tensors):
        if t.shape != s.shape:
            raise DomainError(f"EMA shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        if decay == 0.0:
            t.copy_(s)
        else:
            t.mul_(decay).add_(s.to(t.dtype), alpha=1.0 - decay)


def ema_update(pair: ModelPair, decay: float):
    """Update every shadowed teacher weight (parameters and buffers)."""
    with torch.no_grad():
        for name in pair.student:
            s_state = pair.student[name].state_dict()
            t_state = pair.teacher[name].state_dict()
            ema_update_tensors(
                [t_state[k] for k in s_state], [s_state[k] for k in s_state], decay
            )


def pseudo_label(teacher_pred: SoftPrediction, threshold: float) -> LabelMask:
    """Argmax labels, valid only where max probability strictly exceeds the threshold."""
    if not (0 <= threshold <= 1):
        raise DomainError(f"threshold out of [0,1]: {threshold}")
    probs = teacher_pred.probs
    labels = np.argmax(probs, axis=0)
    valid = probs.max(axis=0) > threshold
    return LabelMask(labels=labels, num_classes=teacher_pred.num_classes, valid=valid)
