"""Command-line entry points: generate, train, eval, export-embeddings."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import data
from .core import (DomainError, TrainConfig, config_from_text, config_to_text,
                   preset_config, validate_config)
from .data import DatasetManifest, make_split
from .trainer import LOG_FIELDS, Trainer, evaluate

ENV_PREFIX = "VOXADV_"


def default_run_root() -> Path:
    return Path(os.environ.get("VOXADV_RUN_DIR", "runs"))


def resolve_config(args) -> TrainConfig:
    """Precedence: preset defaults < config file < environment < flags."""
    if args.config:
        cfg = config_from_text(Path(args.config).read_text())
        if args.preset:
            cfg = cfg.copy(preset=args.preset)
    else:
        cfg = preset_config(args.preset or "synthetic")

    field_names = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for name, f in field_names.items():
        env_key = ENV_PREFIX + name.upper()
        if env_key in os.environ:
            raw = os.environ[env_key]
            if f.type in ("int", int):
                cfg = cfg.copy(**{name: int(raw)})
            elif f.type in ("float", float):
                cfg = cfg.copy(**{name: float(raw)})
            else:
                cfg = cfg.copy(**{name: raw})

    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "labeled_fraction", None) is not None:
        overrides["labeled_fraction"] = args.labeled_fraction
    if getattr(args, "t_max", None) is not None:
        overrides["t_max"] = args.t_max
    if getattr(args, "no_adv", False):
        overrides["alpha"] = 0.0
    if getattr(args, "no_feature", False):
        overrides["beta"] = 0.0
    if getattr(args, "no_consistency", False):
        overrides["gamma_max"] = 0.0
    cfg = cfg.copy(**overrides)
    validated, errors = validate_config(cfg)
    if errors:
        raise DomainError("invalid config:\n  " + "\n  ".join(errors))
    return validated


def _add_common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", choices=["la", "mo", "synthetic"])
    p.add_argument("--seed", type=int)


def cmd_generate(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DomainError(f"{out} exists and is not empty (use --force)")
    manifest = data.generate_synthetic(
        out, seed=cfg.seed, n_train=args.train_cases, n_test=args.test_cases,
        size=args.size, num_classes=args.classes)
    print(out / "manifest.json")
    return manifest


def prepare_run(cfg: TrainConfig, manifest_path, run_dir) -> tuple:
    manifest = DatasetManifest.load(manifest_path)
    if manifest.num_classes != cfg.num_classes:
        cfg = cfg.copy(num_classes=manifest.num_classes)
    make_split(manifest, cfg.labeled_fraction, cfg.seed)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(config_to_text(cfg))
    manifest.save(run_dir / "split_manifest.json")
    # split_manifest paths stay relative to the dataset directory
    split = DatasetManifest.load(run_dir / "split_manifest.json")
    split.root = manifest.root
    return cfg, split, run_dir


def run_training(trainer: Trainer, run_dir: Path, log_mode="w"):
    cfg = trainer.config
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    ckpt_iters = {int(s) for s in cfg.checkpoint_iters.split(",") if s.strip()}
    log_path = run_dir / "train_log.csv"
    with open(log_path, log_mode) as fh:
        if log_mode == "w":
            fh.write(",".join(LOG_FIELDS) + "\n")
        while trainer.iteration < cfg.t_max:
            report = trainer.step()
            fh.write(trainer.log_row(report) + "\n")
            if trainer.iteration in ckpt_iters:
                trainer.save_checkpoint(ckpt_dir / f"ckpt_{trainer.iteration:06d}.vxck")
    final = ckpt_dir / "ckpt_final.vxck"
    trainer.save_checkpoint(final)
    return final


def cmd_train(args):
    cfg = resolve_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else default_run_root() / "train"
    if args.resume:
        manifest = DatasetManifest.load(Path(args.resume).parent.parent / "split_manifest.json")
        data_root = DatasetManifest.load(args.data).root
        manifest.root = data_root
        trainer = Trainer.load_checkpoint(args.resume, manifest)
        run_dir.mkdir(parents=True, exist_ok=True)
        final = run_training(trainer, run_dir, log_mode="a")
    else:
        cfg, manifest, run_dir = prepare_run(cfg, args.data, run_dir)
        trainer = Trainer(cfg, manifest)
        final = run_training(trainer, run_dir)
    print(final)
    return final


EVAL_METRICS = ("dsc", "jaccard", "hd95", "assd")


def write_eval_csv(path, results, num_classes: int):
    classes = list(range(1, num_classes))
    header = ["case_id"]
    for m in EVAL_METRICS:
        header += [f"{m}_class{c}" for c in classes]
        header.append(f"{m}_mean")
    rows = []
    for cid, report in results:
        row = [cid]
        for m, per in (("dsc", report.per_class_dsc),
                       ("jaccard", report.per_class_jaccard),
                       ("hd95", report.per_class_hd95),
                       ("assd", report.per_class_assd)):
            vals = [per[c] for c in classes]
            mean = getattr(report, f"mean_{m}")
            row += ["" if v is None else repr(float(v)) for v in vals]
            row.append("" if mean is None else repr(float(mean)))
        rows.append(row)
    mean_row = ["mean"]
    for i in range(1, len(header)):
        col = [float(r[i]) for r in rows if r[i] != ""]
        mean_row.append(repr(float(np.mean(col))) if col else "")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
        writer.writerow(mean_row)


def cmd_eval(args):
    manifest = DatasetManifest.load(args.data)
    trainer = Trainer.load_checkpoint(args.checkpoint, manifest)
    if trainer.config.num_classes != manifest.num_classes:
        raise DomainError(
            f"checkpoint has {trainer.config.num_classes} classes but manifest "
            f"has {manifest.num_classes}")
    results = evaluate(trainer, manifest, split=args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent.parent / "eval.csv"
    write_eval_csv(out, results, manifest.num_classes)
    print(out)
    return out


def cmd_export_embeddings(args):
    from . import embeddings as emb

    manifest = DatasetManifest.load(args.data)
    make_split(manifest, args.labeled_fraction or 0.1, args.split_seed)
    trainer = Trainer.load_checkpoint(args.checkpoint, manifest)
    feats, records = emb.export_embeddings(trainer, manifest, args.n_per_class,
                                           seed=args.seed or 0)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent.parent / "embeddings"
    projection = emb.write_embedding_dump(out_dir, feats, records)
    class_ids = [r[2] for r in records]
    domains = [r[1] for r in records]
    emb.plot_projection(out_dir / "projection.png", projection, class_ids, domains)
    score = emb.fisher_separation_score(emb.l2_normalize(feats),
                                        np.asarray(class_ids))
    print(f"{out_dir} fisher_score={score:.6f}")
    return out_dir


def build_parser():
    parser = argparse.ArgumentParser(prog="voxadv")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--train-cases", type=int, default=40)
    g.add_argument("--test-cases", type=int, default=10)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the trainer to t_max")
    _add_common(t)
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--run-dir")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--t-max", type=int, dest="t_max")
    t.add_argument("--labeled-fraction", type=float, dest="labeled_fraction")
    t.add_argument("--no-adv", action="store_true")
    t.add_argument("--no-feature", action="store_true")
    t.add_argument("--no-consistency", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate the student on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-embeddings", help="dump fused voxel features + PCA plot")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--n-per-class", type=int, default=100)
    x.add_argument("--seed", type=int)
    x.add_argument("--split-seed", type=int, default=0)
    x.add_argument("--labeled-fraction", type=float, dest="labeled_fraction")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
