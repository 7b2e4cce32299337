"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 1 and 2 retrain the model from scratch (18 runs of 2000 iterations
on a single CPU core) and dominate the wall-clock cost of this module. Run
them explicitly with:

    pytest tests/test_acceptance.py -v -s
"""

import math
import time

import numpy as np
import pytest
import torch

from voxadv.core import (DomainError, LabelMask, SoftPrediction, preset_config,
                         one_hot_encode)
from voxadv.data import DatasetManifest, generate_synthetic, make_split
from voxadv.discriminator import (VoxelDiscriminator, discriminator_loss,
                                  generator_adversarial_loss)
from voxadv.fusion import VoxelFeatureBatch
from voxadv.metrics import assd, dsc, hd95, jaccard
from voxadv.objectives import (consistency_loss, consistency_weight,
                               soft_dice_loss)
from voxadv.representation import RepresentationHeads, feature_loss
from voxadv.teacher_student import ema_update_tensors, pseudo_label
from voxadv.trainer import Trainer, evaluate

from conftest import finite_difference_grad, relative_error, subsample_indices


def criterion(n, ok, detail=""):
    print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {n} failed: {detail}"


# -- shared training protocol (criteria 1, 2, 8, 9) ---------------------------

SEEDS = (0, 1, 2)
T_MAX = 2000

VARIANTS = {
    "full": {},
    "adv": {"beta": 0.0, "gamma_max": 0.0},
    "feat": {"alpha": 0.0, "gamma_max": 0.0},
    "sup": {"alpha": 0.0, "beta": 0.0, "gamma_max": 0.0},
}


@pytest.fixture(scope="module")
def protocol_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_data")
    out = {}
    for k in (2, 4):
        generate_synthetic(root / f"k{k}", seed=100 + k, n_train=40,
                           n_test=10, size=32, num_classes=k)
        out[k] = root / f"k{k}" / "manifest.json"
    return out


def protocol_config(variant, seed, num_classes):
    cfg = preset_config("synthetic", seed=seed, t_max=T_MAX,
                        num_classes=num_classes, base_channels=4,
                        labeled_fraction=0.1)
    return cfg.copy(**VARIANTS[variant])


def train_run(manifest_path, variant, seed, num_classes, run_dir=None,
              probe_branches=False):
    """One full protocol run; returns (mean test DSC in [0,1], trainer)."""
    cfg = protocol_config(variant, seed, num_classes)
    manifest = DatasetManifest.load(manifest_path)
    make_split(manifest, cfg.labeled_fraction, cfg.seed)
    trainer = Trainer(cfg, manifest)
    t0 = time.time()
    log_rows = []
    while trainer.iteration < cfg.t_max:
        report = trainer.step()
        log_rows.append(trainer.log_row(report))
        it = trainer.iteration
        if probe_branches and it % 100 == 0:
            _assert_branch_isolation(trainer.disc, num_classes)
        if run_dir is not None and it == 100:
            trainer.save_checkpoint(run_dir / "ckpt_000100.vxck")
    if run_dir is not None:
        trainer.save_checkpoint(run_dir / "ckpt_final.vxck")
    dscs = [r.mean_dsc for _, r in evaluate(trainer, manifest)]
    mean = float(np.mean(dscs)) / 100.0
    print(f"  run k={num_classes} {variant} seed={seed}: dsc={mean:.4f} "
          f"({time.time() - t0:.0f}s)", flush=True)
    return mean, trainer, log_rows


def _assert_branch_isolation(disc, num_classes):
    """Routing to branches 0..K-2 must leave the last branch at exactly zero
    gradient."""
    torch.manual_seed(0)
    v = torch.randn(8, disc.trunk[0].in_features)
    ids = np.arange(8) % (num_classes - 1)
    loss = discriminator_loss(disc(v[:4], ids[:4]), disc(v[4:], ids[4:]))
    for p in disc.parameters():
        p.grad = None
    loss.backward()
    absent = num_classes - 1
    for p in disc.branches[absent].parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    for p in disc.parameters():
        p.grad = None


@pytest.fixture(scope="module")
def binary_runs(protocol_data, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("acceptance_runs")
    results, extras = {}, {}
    for seed in SEEDS:
        for variant in VARIANTS:
            keep = run_dir if (variant == "full" and seed == 0) else None
            mean, trainer, rows = train_run(protocol_data[2], variant, seed, 2,
                                            run_dir=keep)
            results[(variant, seed)] = mean
            if keep is not None:
                extras["run_dir"] = keep
                extras["log_rows"] = rows
    return results, extras


@pytest.fixture(scope="module")
def multiclass_runs(protocol_data):
    results = {}
    for seed in SEEDS:
        for variant in ("full", "sup"):
            mean, _, _ = train_run(protocol_data[4], variant, seed, 4,
                                   probe_branches=(variant == "full"))
            results[(variant, seed)] = mean
    return results


def test_criterion_1_semi_supervised_benefit(binary_runs):
    results, _ = binary_runs
    mean_of = {v: float(np.mean([results[(v, s)] for s in SEEDS]))
               for v in VARIANTS}
    ordering = (mean_of["full"] > mean_of["adv"] > mean_of["sup"]
                and mean_of["full"] > mean_of["feat"] > mean_of["sup"])
    margin = mean_of["full"] - mean_of["sup"]
    detail = (f"full={mean_of['full']:.4f} adv={mean_of['adv']:.4f} "
              f"feat={mean_of['feat']:.4f} sup={mean_of['sup']:.4f} "
              f"margin={margin:.4f}")
    criterion(1, ordering and margin >= 0.02, detail)


def test_criterion_2_multiclass_routing(multiclass_runs):
    results = multiclass_runs
    full = float(np.mean([results[("full", s)] for s in SEEDS]))
    sup = float(np.mean([results[("sup", s)] for s in SEEDS]))
    margin = full - sup
    criterion(2, margin >= 0.02,
              f"full={full:.4f} sup={sup:.4f} margin={margin:.4f} "
              "(branch isolation probed every 100 steps)")


def test_criterion_3_gradient_verification():
    t0 = time.time()
    torch.manual_seed(0)
    worst = 0.0

    def check(loss_fn, tensors):
        nonlocal worst
        loss = loss_fn()
        for t in tensors:
            t.grad = None
        loss.backward()
        for t in tensors:
            idx = subsample_indices(t.numel(), 8, seed=0)
            _, fd = finite_difference_grad(loss_fn, t, idx, eps=1e-6)
            an = t.grad.reshape(-1)[idx].numpy()
            err = relative_error(an, fd)
            worst = max(worst, err)
            assert err < 1e-4

    # dice on a 4^3 instance
    logits = torch.randn(2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    target = torch.from_numpy(one_hot_encode(LabelMask(
        labels=np.random.default_rng(0).integers(0, 2, (4, 4, 4)),
        num_classes=2)).probs).double()
    check(lambda: soft_dice_loss(torch.softmax(logits, dim=0), target), [logits])

    # consistency on a 4^3 instance
    ps = torch.randn(2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    pt = torch.softmax(torch.randn(2, 4, 4, 4, dtype=torch.float64), dim=0)
    check(lambda: consistency_loss(pt, torch.softmax(ps, dim=0)), [ps])

    # feature loss on 8-vectors
    heads = RepresentationHeads(8).double()
    s = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    t = torch.randn(4, 8, dtype=torch.float64)

    def feat_fn():
        return feature_loss(heads.student_prediction(heads.student_projection(s)),
                            heads.teacher_projection(t))
    check(feat_fn, [s] + list(heads.student_projection.parameters()))

    # generator and discriminator adversarial losses on 8-vectors
    disc = VoxelDiscriminator(8, 2).double()
    v_l = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    v_u = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    ids = np.array([0, 1, 0, 1])
    check(lambda: generator_adversarial_loss(disc(v_u, ids)), [v_u])
    check(lambda: discriminator_loss(disc(v_l, ids), disc(v_u, ids)),
          list(disc.parameters()))

    elapsed = time.time() - t0
    criterion(3, elapsed < 60,
              f"worst relative error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_4_closed_form_losses():
    # perfect dice
    labels = np.random.default_rng(1).integers(0, 2, (6, 6, 6))
    onehot = torch.from_numpy(one_hot_encode(
        LabelMask(labels=labels, num_classes=2)).probs)
    perfect = float(soft_dice_loss(onehot, onehot))

    # feature loss identity / orthogonal / antipodal
    e1 = torch.tensor([[1.0, 0.0]])
    e2 = torch.tensor([[0.0, 1.0]])
    ident = float(feature_loss(e1, e1 * 3.0))
    ortho = float(feature_loss(e1, e2))
    anti = float(feature_loss(e1, -e1))

    # uninformative discriminator
    half = torch.full((4,), 0.5, dtype=torch.float64)
    d_half = float(discriminator_loss(half, half))

    # warm-up endpoints
    g0 = consistency_weight(0, 1000, 0.001)
    g1 = consistency_weight(1000, 1000, 0.001)

    ok = (perfect < 1e-4
          and abs(ident - 0.0) < 1e-6
          and abs(ortho - 2.0) < 1e-6
          and abs(anti - 4.0) < 1e-6
          and abs(d_half - 2 * math.log(2)) < 1e-9
          and abs(g0 - 0.001 * math.exp(-5)) < 1e-9
          and abs(g1 - 0.001) < 1e-9)
    criterion(4, ok,
              f"dice={perfect:.2e} feat=({ident:.1e},{ortho:.6f},{anti:.6f}) "
              f"disc={d_half:.12f} gamma=({g0:.3e},{g1:.3e})")


def test_criterion_5_ema_exactness():
    lam, k = 0.99, 83
    theta0, v = 1.75, -0.5
    t = torch.tensor([theta0], dtype=torch.float64)
    s = torch.tensor([v], dtype=torch.float64)
    for _ in range(k):
        ema_update_tensors([t], [s], lam)
    closed = v + (theta0 - v) * lam ** k
    err = abs(t.item() - closed)

    t2 = torch.randn(64, dtype=torch.float64)
    s2 = torch.randn(64, dtype=torch.float64)
    ema_update_tensors([t2], [s2], 0.0)
    bitwise = torch.equal(t2, s2)
    criterion(5, err < 1e-12 and bitwise,
              f"geometric error {err:.2e}, lambda=0 copy bitwise={bitwise}")


def test_criterion_6_metric_oracles():
    from test_metrics import brute_force_distances

    rng = np.random.default_rng(6)
    checked = 0
    worst_identity = 0.0
    for trial in range(200):
        size = int(rng.integers(4, 17))
        a = LabelMask(labels=rng.integers(0, 2, (size,) * 3), num_classes=2)
        b = LabelMask(labels=rng.integers(0, 2, (size,) * 3), num_classes=2)

        inter = np.logical_and(a.labels == 1, b.labels == 1).sum()
        na, nb = (a.labels == 1).sum(), (b.labels == 1).sum()
        d_oracle = 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)
        union = np.logical_or(a.labels == 1, b.labels == 1).sum()
        j_oracle = 1.0 if union == 0 else inter / union
        assert dsc(a, b, 1) == d_oracle
        assert jaccard(a, b, 1) == j_oracle
        worst_identity = max(worst_identity,
                             abs(jaccard(a, b, 1) - d_oracle / (2 - d_oracle)))

        _, d_ab, d_ba = brute_force_distances(a, b, 1)
        if d_ab is None:
            assert hd95(a, b, 1) is None and assd(a, b, 1) is None
        else:
            pooled = np.concatenate([d_ab, d_ba])
            assert hd95(a, b, 1) == float(
                np.percentile(pooled, 95, method="linear"))
            assert assd(a, b, 1) == float((d_ab.mean() + d_ba.mean()) / 2)
        checked += 1
    criterion(6, checked == 200 and worst_identity < 1e-12,
              f"{checked} pairs exact, identity error {worst_identity:.2e}")


def test_criterion_7_pseudo_label_contract():
    probs = np.zeros((2, 1, 1, 1), dtype=np.float32)
    probs[0] = 0.7
    probs[1] = 0.3
    at_boundary = pseudo_label(SoftPrediction(probs), 0.7)
    strict = not at_boundary.valid[0, 0, 0]

    rng = np.random.default_rng(7)
    raw = rng.random((3, 6, 6, 6))
    pred = SoftPrediction((raw / raw.sum(axis=0, keepdims=True)).astype(np.float32))
    counts = [int(pseudo_label(pred, t).valid.sum())
              for t in np.linspace(0.0, 1.0, 21)]
    monotone = all(b <= a for a, b in zip(counts, counts[1:]))
    criterion(7, strict and monotone,
              f"boundary strict={strict}, sweep {counts[0]}->{counts[-1]} "
              f"monotone={monotone}")


def test_criterion_8_feature_alignment_trend(binary_runs, protocol_data,
                                             tmp_path_factory):
    from voxadv import embeddings as emb

    _, extras = binary_runs
    run_dir = extras["run_dir"]
    manifest = DatasetManifest.load(protocol_data[2])
    make_split(manifest, 0.1, 0)
    scores = {}
    for tag in ("000100", "final"):
        trainer = Trainer.load_checkpoint(run_dir / f"ckpt_{tag}.vxck", manifest)
        feats, records = emb.export_embeddings(trainer, manifest, 100, seed=0)
        ids = np.asarray([r[2] for r in records])
        scores[tag] = emb.fisher_separation_score(emb.l2_normalize(feats), ids)
    ok = scores["final"] > scores["000100"]
    criterion(8, ok, f"iter 100 score={scores['000100']:.4f}, "
                     f"iter {T_MAX} score={scores['final']:.4f}")


def test_criterion_9_reproducibility(binary_runs, protocol_data):
    _, extras = binary_runs
    first = extras["log_rows"]
    _, _, second = train_run(protocol_data[2], "full", 0, 2)
    ok = first == second
    criterion(9, ok, f"{len(first)} log rows identical={ok}")
