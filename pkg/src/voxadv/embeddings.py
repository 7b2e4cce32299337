"""Fused voxel-feature export, PCA projection and class-separation scoring."""

from __future__ import annotations

import csv
import zlib
from pathlib import Path

import numpy as np
import torch

from .core import DomainError, LabelMask
from .data import DatasetManifest, LABELED, UNLABELED
from .fusion import FusedFeatureGrid, sample_voxel_features
from .teacher_student import pseudo_label
from .core import SoftPrediction

RECORD_FIELDS = ("case_id", "domain", "class_id", "x", "y", "z")


def export_embeddings(trainer, manifest: DatasetManifest, n_per_class: int,
                      seed: int = 0):
    """Sample fused voxel features across the training cases.

    Labeled cases use ground-truth class routing; unlabeled cases use
    pseudo-labels from the teacher. Returns (features (N, C), records).
    """
    feats, records = [], []
    for domain, split in ((LABELED, LABELED), (UNLABELED, UNLABELED)):
        for cid in manifest.ids(split):
            vol = manifest.load_volume(cid)
            x = torch.from_numpy(vol.voxels).float()[None, None]
            with torch.no_grad():
                probs, taps = trainer.student_backbone(x)
                fused = trainer.student_fusion(taps)[0]
            if domain == LABELED:
                mask = manifest.load_mask(cid)
            else:
                mask = pseudo_label(SoftPrediction(probs[0].numpy()),
                                    trainer.config.threshold_t)
            case_key = zlib.crc32(cid.encode("utf-8"))
            batch = sample_voxel_features(FusedFeatureGrid(fused), mask,
                                          n_per_class, seed=[seed, case_key],
                                          domain=domain)
            if batch.is_empty:
                continue
            feats.append(batch.vectors.numpy())
            for c, pos in zip(batch.class_ids, batch.positions):
                records.append((cid, domain, int(c), int(pos[0]), int(pos[1]), int(pos[2])))
    if not feats:
        raise DomainError("no voxel features could be sampled")
    return np.concatenate(feats), records


def l2_normalize(features: np.ndarray) -> np.ndarray:
    """Scale each feature vector to unit l2 norm (zero vectors stay zero).

    The feature loss and class routing act on direction, not magnitude, and
    raw fused-feature norms drift over training without carrying class
    information, so separation is always measured on unit vectors.
    """
    features = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    return features / np.where(norms == 0, 1.0, norms)


def pca_project(features: np.ndarray, n_components: int = 2) -> np.ndarray:
    """Deterministic PCA: components sign-fixed so the first nonzero loading
    of each component is positive."""
    x = features - features.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:n_components]
    for i, comp in enumerate(comps):
        nz = np.flatnonzero(np.abs(comp) > 1e-12)
        if len(nz) and comp[nz[0]] < 0:
            comps[i] = -comp
    return x @ comps.T


def fisher_separation_score(points: np.ndarray, class_ids: np.ndarray) -> float:
    """Between-class centroid scatter over mean within-class variance."""
    classes = np.unique(class_ids)
    if len(classes) < 2:
        raise DomainError("need at least two classes for a separation score")
    global_mean = points.mean(axis=0)
    between, within = 0.0, 0.0
    for c in classes:
        pts = points[class_ids == c]
        mu = pts.mean(axis=0)
        between += len(pts) * float(((mu - global_mean) ** 2).sum())
        within += float(((pts - mu) ** 2).sum())
    if within == 0:
        return float("inf")
    return between / within


def write_embedding_dump(out_dir, features: np.ndarray, records, projection=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "features.npy", features)
    if projection is None:
        projection = pca_project(l2_normalize(features))
    np.save(out_dir / "projection.npy", projection)
    with open(out_dir / "records.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_FIELDS + ("pc1", "pc2"))
        for rec, pt in zip(records, projection):
            writer.writerow(list(rec) + [repr(float(pt[0])), repr(float(pt[1]))])
    return projection


def plot_projection(out_path, projection: np.ndarray, class_ids, domains):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    class_ids = np.asarray(class_ids)
    domains = np.asarray(domains)
    fig, ax = plt.subplots(figsize=(6, 5))
    cmap = plt.get_cmap("tab10")
    for c in np.unique(class_ids):
        for domain, marker in ((LABELED, "o"), (UNLABELED, "^")):
            sel = (class_ids == c) & (domains == domain)
            if not sel.any():
                continue
            ax.scatter(projection[sel, 0], projection[sel, 1], s=6,
                       color=cmap(int(c) % 10), marker=marker, alpha=0.6,
                       label=f"class {c} ({domain})")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=7, markerscale=2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
