"""Segmentation evaluation metrics: DSC, Jaccard, HD95 and ASSD.

Surfaces are boundary voxels under 6-connectivity (a class voxel with at
least one 6-neighbor outside the class, or on the volume border). HD95 uses
the 95th percentile of the pooled directed surface distances from both
directions, with linear interpolation between order statistics. ASSD is the
mean of the two directed average nearest-surface distances.

The nearest-distance kernel is compiled (Cython) when available, with a
numpy fallback selected at import time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .core import DomainError, LabelMask

try:
    from ._surfdist import directed_min_distances
    KERNEL_BACKEND = "compiled"
except ImportError:  # pragma: no cover - depends on build environment
    from ._surfdist_py import directed_min_distances
    KERNEL_BACKEND = "numpy"

from ._surfdist_py import directed_min_distances as directed_min_distances_py


def _class_set(mask: LabelMask, c: int) -> np.ndarray:
    return mask.labels == c


def dsc(a: LabelMask, b: LabelMask, c: int) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both class-c sets are empty."""
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    sa, sb = _class_set(a, c), _class_set(b, c)
    na, nb = int(sa.sum()), int(sb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((sa & sb).sum()) / (na + nb)


def jaccard(a: LabelMask, b: LabelMask, c: int) -> float:
    """|A∩B| / |A∪B|; 1.0 when both empty."""
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    sa, sb = _class_set(a, c), _class_set(b, c)
    union = int((sa | sb).sum())
    if union == 0:
        return 1.0
    return int((sa & sb).sum()) / union


def boundary_voxels(class_set: np.ndarray) -> np.ndarray:
    """Class voxels with a 6-neighbor outside the class or on the volume border."""
    s = np.asarray(class_set, dtype=bool)
    interior = np.ones_like(s)
    for axis in range(3):
        inside = np.zeros_like(s)
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[axis] = slice(1, None)
        sl_hi[axis] = slice(None, -1)
        # neighbor below / above along this axis is also in the class
        below = np.zeros_like(s)
        below[tuple(sl_lo)] = s[tuple(sl_hi)]
        above = np.zeros_like(s)
        above[tuple(sl_hi)] = s[tuple(sl_lo)]
        interior &= below & above
    return s & ~interior


def surface_points(mask: LabelMask, c: int, spacing=None) -> np.ndarray:
    """(N, 3) physical coordinates of the class-c boundary voxels."""
    sp = np.asarray(spacing if spacing is not None else (1.0, 1.0, 1.0), dtype=np.float64)
    pts = np.argwhere(boundary_voxels(_class_set(mask, c))).astype(np.float64)
    return pts * sp[None, :]


def _surface_distances(a: LabelMask, b: LabelMask, c: int, spacing, kernel):
    pa = surface_points(a, c, spacing)
    pb = surface_points(b, c, spacing)
    if len(pa) == 0 or len(pb) == 0:
        return None, None
    return kernel(pa, pb), kernel(pb, pa)


def hd95(a: LabelMask, b: LabelMask, c: int, spacing=None,
         kernel=directed_min_distances) -> Optional[float]:
    """95th percentile of pooled bidirectional surface distances; None if a
    surface is empty (undefined-metric marker)."""
    d_ab, d_ba = _surface_distances(a, b, c, spacing, kernel)
    if d_ab is None:
        return None
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95,
                               method="linear"))


def assd(a: LabelMask, b: LabelMask, c: int, spacing=None,
         kernel=directed_min_distances) -> Optional[float]:
    """Mean of the two directed average nearest-surface distances."""
    d_ab, d_ba = _surface_distances(a, b, c, spacing, kernel)
    if d_ab is None:
        return None
    return float((d_ab.mean() + d_ba.mean()) / 2.0)


@dataclass
class MetricReport:
    """Per-foreground-class and mean metrics for one mask pair.

    DSC and Jaccard are percentages; distances are in the unit named by
    ``unit`` ("voxel" when spacing is isotropic 1, else "mm").
    """

    per_class_dsc: Dict[int, float]
    per_class_jaccard: Dict[int, float]
    per_class_hd95: Dict[int, Optional[float]]
    per_class_assd: Dict[int, Optional[float]]
    unit: str

    def _mean(self, d):
        vals = [v for v in d.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_dsc(self):
        return self._mean(self.per_class_dsc)

    @property
    def mean_jaccard(self):
        return self._mean(self.per_class_jaccard)

    @property
    def mean_hd95(self):
        return self._mean(self.per_class_hd95)

    @property
    def mean_assd(self):
        return self._mean(self.per_class_assd)


def evaluate_masks(pred: LabelMask, gt: LabelMask, spacing=None) -> MetricReport:
    """Evaluate all foreground classes (1..K-1) of a prediction against truth."""
    if pred.num_classes != gt.num_classes:
        raise DomainError(
            f"class-count mismatch: {pred.num_classes} vs {gt.num_classes}"
        )
    unit = "voxel"
    if spacing is not None and tuple(spacing) != (1.0, 1.0, 1.0):
        unit = "mm"
    classes = range(1, gt.num_classes)
    return MetricReport(
        per_class_dsc={c: 100.0 * dsc(pred, gt, c) for c in classes},
        per_class_jaccard={c: 100.0 * jaccard(pred, gt, c) for c in classes},
        per_class_hd95={c: hd95(pred, gt, c, spacing) for c in classes},
        per_class_assd={c: assd(pred, gt, c, spacing) for c in classes},
        unit=unit,
    )
