"""The full optimization loop: batch assembly, four-loss student update,
alternating discriminator update, EMA step, schedules and checkpointing."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from . import container
from .backbone import VNetBackbone, init_backbone
from .core import (DomainError, LabelMask, SoftPrediction, TrainConfig, Volume,
                   config_from_text, config_to_text, one_hot_encode, validate_config)
from .data import DatasetManifest, LABELED, UNLABELED, TEST
from .discriminator import VoxelDiscriminator, discriminator_loss, generator_adversarial_loss
from .fusion import (FeatureFusion, FusedFeatureGrid, VoxelFeatureBatch,
                     fused_features_at, sample_class_positions, sample_voxel_features)
from .objectives import (LossReport, consistency_loss, consistency_weight,
                         soft_dice_loss, total_loss)
from .representation import RepresentationHeads, feature_loss, representation_forward
from .teacher_student import ModelPair, ema_update, make_model_pair, pseudo_label

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"

LOG_FIELDS = ("iteration", "lr", "dice", "consistency", "adversarial", "feature",
              "total", "gamma_t", "valid_pseudo_fraction")


def lr_at(iteration: int, lr0: float, decay_every: int, decay_factor: float) -> float:
    """Step decay: lr0 * factor^(iteration // every)."""
    if iteration < 0:
        raise DomainError(f"iteration must be >= 0, got {iteration}")
    if decay_every <= 0:
        return lr0
    return lr0 * decay_factor ** (iteration // decay_every)


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _features_at(grid: torch.Tensor, positions: np.ndarray) -> torch.Tensor:
    return grid[:, positions[:, 0], positions[:, 1], positions[:, 2]].T


class Trainer:
    """Owns all model state for one training run. ``train_step`` is
    deterministic given (config, manifest, iteration); all per-step
    randomness derives from (seed, iteration) so a resumed run continues
    bit-exactly."""

    def __init__(self, config: TrainConfig, manifest: DatasetManifest):
        cfg, errors = validate_config(config)
        if errors:
            raise DomainError("invalid config: " + "; ".join(errors))
        self.config = cfg
        self.manifest = manifest
        self.iteration = 0
        self._cache = {}

        self.student_backbone = init_backbone(cfg.seed, cfg.base_channels, cfg.num_classes)
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed + 1)
            self.student_fusion = FeatureFusion(self.student_backbone.tap_channels,
                                                cfg.fused_channels)
            self.heads = RepresentationHeads(cfg.fused_channels)
            self.disc = VoxelDiscriminator(cfg.fused_channels, cfg.num_classes)

        self.pair = make_model_pair({
            "backbone": self.student_backbone,
            "fusion": self.student_fusion,
            "projection": self.heads.student_projection,
        })
        self.teacher_backbone = self.pair.teacher["backbone"]
        self.teacher_fusion = self.pair.teacher["fusion"]
        self.heads.teacher_projection = self.pair.teacher["projection"]

        student_params = (list(self.student_backbone.parameters())
                          + list(self.student_fusion.parameters())
                          + list(self.heads.student_projection.parameters())
                          + list(self.heads.student_prediction.parameters()))
        if cfg.student_optimizer == "sgd":
            self.opt_student = torch.optim.SGD(student_params, lr=cfg.lr_student,
                                               momentum=0.9, weight_decay=1e-4)
        else:
            self.opt_student = torch.optim.Adam(student_params, lr=cfg.lr_student,
                                                betas=(0.9, 0.999))
        self.opt_disc = torch.optim.Adam(self.disc.parameters(),
                                         lr=cfg.lr_discriminator, betas=(0.5, 0.999))

    # -- data handling -------------------------------------------------------

    def _load(self, case_id: str):
        if case_id not in self._cache:
            vol = self.manifest.load_volume(case_id)
            entry = self.manifest.case(case_id)
            mask = self.manifest.load_mask(case_id) if entry.mask else None
            self._cache[case_id] = (vol.voxels, None if mask is None else mask.labels)
        return self._cache[case_id]

    def _augment(self, rng, voxels, labels):
        ps = self.config.patch_size
        for axis in range(3):
            lim = voxels.shape[axis] - ps
            off = int(rng.integers(0, lim + 1)) if lim > 0 else 0
            sl = [slice(None)] * 3
            sl[axis] = slice(off, off + ps)
            voxels = voxels[tuple(sl)]
            labels = labels[tuple(sl)] if labels is not None else None
        flips = [axis for axis in range(3) if rng.integers(0, 2)]
        if flips:
            voxels = np.flip(voxels, axis=flips)
            labels = np.flip(labels, axis=flips) if labels is not None else None
        return np.ascontiguousarray(voxels), (
            None if labels is None else np.ascontiguousarray(labels))

    def assemble_batch(self, iteration: int):
        """Deterministic (seed, iteration)-keyed batch of labeled and
        unlabeled patches."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, iteration, 0])
        labeled_ids = self.manifest.ids(LABELED)
        unlabeled_ids = self.manifest.ids(UNLABELED)
        if not labeled_ids:
            raise DomainError("manifest has no labeled training cases")

        def pick(ids, count):
            if not ids or count == 0:
                return []
            idx = rng.choice(len(ids), size=count, replace=len(ids) < count)
            return [ids[i] for i in idx]

        labeled, unlabeled = [], []
        for cid in pick(labeled_ids, cfg.batch_labeled):
            voxels, labels = self._load(cid)
            v, m = self._augment(rng, voxels, labels)
            labeled.append((v, m))
        for cid in pick(unlabeled_ids, cfg.batch_unlabeled):
            voxels, _ = self._load(cid)
            v, _ = self._augment(rng, voxels, None)
            unlabeled.append(v)
        return labeled, unlabeled

    # -- one optimization step -------------------------------------------------

    def train_step(self, labeled_batch, unlabeled_batch) -> LossReport:
        cfg = self.config
        it = self.iteration
        if it >= cfg.t_max:
            raise DomainError(f"iteration {it} >= t_max {cfg.t_max}")
        n_l, n_u = len(labeled_batch), len(unlabeled_batch)

        x = torch.stack(
            [torch.from_numpy(v).float() for v, _ in labeled_batch]
            + [torch.from_numpy(v).float() for v in unlabeled_batch]
        )[:, None]
        gt_onehot = torch.stack([
            torch.from_numpy(one_hot_encode(
                LabelMask(labels=m, num_classes=cfg.num_classes)).probs)
            for _, m in labeled_batch
        ])

        use_adv = cfg.alpha > 0 and n_u > 0
        use_feat = cfg.beta > 0
        use_cons = cfg.gamma_max > 0

        probs_s, taps_s = self.student_backbone(x)
        with torch.no_grad():
            probs_t, taps_t = self.teacher_backbone(x)

        dice = soft_dice_loss(probs_s[:n_l], gt_onehot)

        gamma_t = consistency_weight(it, cfg.t_max, cfg.gamma_max) if use_cons else 0.0
        cons = consistency_loss(probs_t, probs_s) if use_cons else torch.zeros(())

        def student_feats(vol_idx, positions):
            return fused_features_at(self.student_fusion,
                                     [t[vol_idx] for t in taps_s], positions)

        # pseudo-labels for the unlabeled volumes (teacher predictions)
        pseudo_masks, valid_fracs = [], []
        for i in range(n_u):
            pred = SoftPrediction(probs_t[n_l + i].numpy())
            pm = pseudo_label(pred, cfg.threshold_t)
            pseudo_masks.append(pm)
            valid_fracs.append(float(pm.valid.mean()))
        valid_pseudo_fraction = float(np.mean(valid_fracs)) if valid_fracs else 1.0

        # voxel-wise representation loss on labeled volumes
        feat = torch.zeros(())
        if use_feat:
            s_out, t_out = [], []
            for i in range(n_l):
                mask = LabelMask(labels=labeled_batch[i][1], num_classes=cfg.num_classes)
                ids, positions = sample_class_positions(mask, cfg.per_class_cap,
                                                        seed=[cfg.seed, it, 2, i])
                if len(ids) == 0:
                    continue
                domains = np.full(len(ids), "labeled", dtype="<U9")
                sb = VoxelFeatureBatch(student_feats(i, positions), ids, domains, positions)
                with torch.no_grad():
                    t_vecs = fused_features_at(self.teacher_fusion,
                                               [t[i] for t in taps_t], positions)
                tb = VoxelFeatureBatch(t_vecs, ids, domains, positions)
                so, to = representation_forward(self.heads, sb, tb)
                s_out.append(so)
                t_out.append(to)
            if s_out:
                feat = feature_loss(torch.cat(s_out), torch.cat(t_out))

        # generator adversarial loss on unlabeled voxel features
        adv = torch.zeros(())
        unlabeled_samples = []
        if use_adv:
            gen_vecs, gen_ids = [], []
            for i in range(n_u):
                pm = pseudo_masks[i]
                ids, positions = sample_class_positions(pm, cfg.per_class_cap,
                                                        seed=[cfg.seed, it, 3, i])
                if len(ids) == 0:
                    log.info("iteration %d: unlabeled volume %d has no valid "
                             "pseudo-label voxels; skipping adversarial routing", it, i)
                    continue
                vecs = student_feats(n_l + i, positions)
                unlabeled_samples.append((vecs, ids))
                gen_vecs.append(vecs)
                gen_ids.append(ids)
            if gen_vecs:
                _set_requires_grad(self.disc, False)
                scores = self.disc(torch.cat(gen_vecs), np.concatenate(gen_ids))
                adv = generator_adversarial_loss(scores)
                _set_requires_grad(self.disc, True)

        total, report = total_loss(dice, cons, adv, feat,
                                   alpha=cfg.alpha, beta=cfg.beta,
                                   gamma_t=gamma_t, iteration=it)

        # (7) student step
        lr = lr_at(it, cfg.lr_student, cfg.lr_decay_every, cfg.lr_decay_factor)
        for group in self.opt_student.param_groups:
            group["lr"] = lr
        self.opt_student.zero_grad(set_to_none=True)
        total.backward()
        self.opt_student.step()

        # (8) discriminator step(s) on detached student features
        if use_adv and unlabeled_samples:
            real_vecs, real_ids = [], []
            for i in range(n_l):
                mask = LabelMask(labels=labeled_batch[i][1], num_classes=cfg.num_classes)
                ids, positions = sample_class_positions(mask, cfg.per_class_cap,
                                                        seed=[cfg.seed, it, 4, i])
                if len(ids):
                    real_vecs.append(student_feats(i, positions).detach())
                    real_ids.append(ids)
            fake_vecs = torch.cat([v for v, _ in unlabeled_samples]).detach()
            fake_ids = np.concatenate([ids for _, ids in unlabeled_samples])
            if real_vecs:
                for _ in range(cfg.disc_steps_per_student_step):
                    s_real = self.disc(torch.cat(real_vecs), np.concatenate(real_ids))
                    s_fake = self.disc(fake_vecs, fake_ids)
                    d_loss = discriminator_loss(s_real, s_fake)
                    self.opt_disc.zero_grad(set_to_none=True)
                    d_loss.backward()
                    self.opt_disc.step()

        # (9) EMA teacher update, (10) bookkeeping
        ema_update(self.pair, cfg.lambda_ema)
        self.iteration = it + 1
        self._last_lr = lr
        self._last_valid_fraction = valid_pseudo_fraction
        return report

    def step(self) -> LossReport:
        labeled, unlabeled = self.assemble_batch(self.iteration)
        return self.train_step(labeled, unlabeled)

    def log_row(self, report: LossReport) -> str:
        vals = {
            "iteration": report.iteration,
            "lr": self._last_lr,
            "dice": report.dice,
            "consistency": report.consistency,
            "adversarial": report.adversarial,
            "feature": report.feature,
            "total": report.total,
            "gamma_t": report.gamma_t,
            "valid_pseudo_fraction": self._last_valid_fraction,
        }
        return ",".join(repr(vals[f]) for f in LOG_FIELDS)

    # -- inference -----------------------------------------------------------

    def predict(self, volume: Volume) -> LabelMask:
        """Student-only segmentation of one volume."""
        x = torch.from_numpy(volume.voxels).float()[None, None]
        with torch.no_grad():
            probs, _ = self.student_backbone(x)
        labels = probs[0].argmax(dim=0).numpy()
        return LabelMask(labels=labels, num_classes=self.config.num_classes)

    # -- checkpointing ---------------------------------------------------------

    def _modules(self):
        return {
            "student/backbone": self.student_backbone,
            "student/fusion": self.student_fusion,
            "student/projection": self.heads.student_projection,
            "student/prediction": self.heads.student_prediction,
            "teacher/backbone": self.teacher_backbone,
            "teacher/fusion": self.teacher_fusion,
            "teacher/projection": self.heads.teacher_projection,
            "disc": self.disc,
        }

    def save_checkpoint(self, path):
        entries = {}
        for prefix, module in self._modules().items():
            for key, tensor in module.state_dict().items():
                entries[f"{prefix}/{key}"] = tensor.detach().numpy()
        for opt_name, opt in (("opt_student", self.opt_student),
                              ("opt_disc", self.opt_disc)):
            state = opt.state_dict()["state"]
            for pid, bufs in state.items():
                for key, val in bufs.items():
                    if isinstance(val, torch.Tensor):
                        arr = val.detach().numpy()
                    else:
                        arr = np.array(float(val), dtype=np.float64)
                    entries[f"{opt_name}/{pid}/{key}"] = arr
        meta = {
            "format": "voxadv-checkpoint",
            "version": CHECKPOINT_VERSION,
            "iteration": str(self.iteration),
            "config": config_to_text(self.config),
        }
        container.write_container(path, entries, meta)
        return path

    @classmethod
    def load_checkpoint(cls, path, manifest: DatasetManifest) -> "Trainer":
        entries, meta = container.read_container(path)
        if meta.get("format") != "voxadv-checkpoint":
            raise container.ContainerError(f"{path}: not a voxadv checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise container.ContainerError(
                f"{path}: unsupported checkpoint version {meta.get('version')}")
        cfg = config_from_text(meta["config"])
        trainer = cls(cfg, manifest)
        trainer.iteration = int(meta["iteration"])
        for prefix, module in trainer._modules().items():
            state = {}
            for key in module.state_dict():
                full = f"{prefix}/{key}"
                if full not in entries:
                    raise container.ContainerError(f"{path}: missing entry {full}")
                state[key] = torch.from_numpy(entries[full].copy())
            module.load_state_dict(state)
        for opt_name, opt in (("opt_student", trainer.opt_student),
                              ("opt_disc", trainer.opt_disc)):
            state = {}
            for name, arr in entries.items():
                if not name.startswith(opt_name + "/"):
                    continue
                _, pid, key = name.split("/", 2)
                bufs = state.setdefault(int(pid), {})
                if key == "step":
                    bufs[key] = torch.tensor(float(arr))
                else:
                    bufs[key] = torch.from_numpy(arr.copy())
            sd = opt.state_dict()
            sd["state"] = state
            opt.load_state_dict(sd)
        return trainer


def evaluate(trainer: Trainer, manifest: DatasetManifest, split=TEST):
    """Per-case metric reports for the student on a split."""
    from .metrics import evaluate_masks

    results = []
    for cid in manifest.ids(split):
        vol = manifest.load_volume(cid)
        gt = manifest.load_mask(cid)
        pred = trainer.predict(vol)
        results.append((cid, evaluate_masks(pred, gt, vol.spacing)))
    return results
