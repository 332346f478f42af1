"""Command-line entry point: split, train, eval, ensemble, gradcam, report.

One --seed flag feeds every random choice (split membership, crop offsets,
weight init, shuffling), so identical invocations reproduce identical
outputs. All errors exit nonzero with the failing operation named.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data, ensemble, explain, trainer
from .errors import EmptyLedger, PestclfError
from .metrics import confusion, format_report, macro_report, worst_classes
from .preprocess import aspect_resize, center_crop, normalize

LEDGER_HEADER = "dataset,model,acc,mpre,mrec,mf1,gm,timestamp,config_hash"


def config_hash(cfg: trainer.TrainRunConfig) -> str:
    digest = hashlib.sha256(trainer.dump_run_config(cfg).encode()).hexdigest()
    return digest[:12]


def append_ledger(path, dataset: str, model: str, report, cfg_hash: str,
                  timestamp: str | None = None) -> None:
    """Append one results row, writing the header on first use."""
    path = Path(path)
    stamp = timestamp or time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    row = (f"{dataset},{model},{report.acc:.6f},{report.mpre:.6f},"
           f"{report.mrec:.6f},{report.mf1:.6f},{report.gm:.6f},"
           f"{stamp},{cfg_hash}\n")
    if not path.exists():
        path.write_text(LEDGER_HEADER + "\n" + row, encoding="utf-8")
    else:
        with path.open("a", encoding="utf-8") as fh:
            fh.write(row)


def read_ledger(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise EmptyLedger(f"report: ledger {path} does not exist")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines()
             if ln.strip()]
    if len(lines) < 2:
        raise EmptyLedger(f"report: ledger {path} has no data rows")
    keys = lines[0].split(",")
    return [dict(zip(keys, ln.split(","))) for ln in lines[1:]]


def format_comparison(rows: list[dict], dataset: str | None = None) -> str:
    """Model comparison table, best accuracy first."""
    if dataset is not None:
        rows = [r for r in rows if r["dataset"] == dataset]
    if not rows:
        raise EmptyLedger(f"report: no ledger rows for dataset {dataset!r}")
    rows = sorted(rows, key=lambda r: (-float(r["acc"]), r["model"]))
    title = f"model comparison ({rows[0]['dataset']})" if dataset else "model comparison"
    lines = [title,
             f"{'model':<28}{'acc':>8}{'mpre':>8}{'mrec':>8}{'mf1':>8}{'gm':>8}"]
    for r in rows:
        lines.append((f"{r['model']:<28}{float(r['acc']):>8.4f}"
                      f"{float(r['mpre']):>8.4f}{float(r['mrec']):>8.4f}"
                      f"{float(r['mf1']):>8.4f}{float(r['gm']):>8.4f}"))
    return "\n".join(lines) + "\n"


def format_worst(probs_csv, k: int, class_names: list[str] | None = None) -> str:
    """Worst-k classes table from an exported probability file."""
    matrix = ensemble.read_csv(probs_csv)
    if matrix.true_labels is None:
        raise PestclfError(f"report: {probs_csv} carries no true labels")
    predictions = ensemble.decide(matrix)
    report = macro_report(confusion(matrix.true_labels, predictions,
                                    matrix.num_classes))
    worst = worst_classes(report, min(k, report.num_classes))
    lines = [f"worst {len(worst)} classes ({Path(probs_csv).name})",
             f"{'class':<28}{'accuracy':>10}"]
    for cls, acc in worst:
        name = class_names[cls] if class_names else str(cls)
        lines.append(f"{name:<28}{acc:>10.4f}")
    return "\n".join(lines) + "\n"


def _load_label_space(splits_dir: Path) -> data.LabelSpace:
    names = (splits_dir / "classes.txt").read_text(encoding="utf-8").split()
    return data.LabelSpace(tuple(names))


def _resolve_pretrained(path_value: str | None) -> str | None:
    """Resolve a pretrained-weights path, trying the cache dir for bare names."""
    if not path_value:
        return None
    candidate = Path(path_value)
    if candidate.exists():
        return str(candidate)
    cache = Path(os.environ.get("PESTCLF_CACHE_DIR",
                                Path.home() / ".cache" / "pestclf"))
    cached = cache / candidate.name
    if cached.exists():
        return str(cached)
    raise PestclfError(f"train: pretrained weights {path_value} not found "
                       f"(also tried {cached})")


def _cmd_split(args) -> int:
    parts = [float(v) for v in args.ratios.split(",")]
    if len(parts) != 3:
        raise PestclfError("split: --ratios needs three comma-separated fractions")
    ratios = data.SplitRatios(*parts)
    labels = data.scan_label_space(args.root)
    records = data.scan_records(args.root, labels)
    manifests = data.make_random_split(records, ratios, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "classes.txt").write_text("\n".join(labels.names) + "\n",
                                     encoding="utf-8")
    for manifest in manifests:
        data.save_manifest(manifest, out / f"{manifest.split_name}.txt")
        print(f"{manifest.split_name}: {len(manifest)} records")
    return 0


def _cmd_train(args) -> int:
    if args.config:
        cfg = trainer.parse_run_config(args.config, model=args.model,
                                       seed=args.seed)
    else:
        cfg = trainer.default_config(args.model, seed=args.seed or 0)
    cfg.pretrained_backbone = _resolve_pretrained(cfg.pretrained_backbone)
    splits = Path(args.splits)
    labels = _load_label_space(splits)
    train_manifest = data.load_fixed_split(splits / "train.txt", labels, "train")
    val_manifest = data.load_fixed_split(splits / "val.txt", labels, "val")
    ckpt, history = trainer.train(cfg, labels, train_manifest, val_manifest,
                                  args.data, args.out,
                                  num_workers=args.workers)
    print(f"best epoch {history.best_epoch}: "
          f"val_acc {max(history.val_acc):.4f}; checkpoint {ckpt}")
    return 0


def _cmd_eval(args) -> int:
    splits = Path(args.splits)
    labels = _load_label_space(splits)
    manifest = data.load_fixed_split(splits / f"{args.split}.txt", labels,
                                     args.split)
    matrix, report = trainer.evaluate_export(
        args.ckpt, manifest, args.data, out_csv=args.export,
        label_space=labels, num_workers=args.workers)
    print(format_report(report, labels.names), end="")
    if args.boxes or args.ledger:
        model, cfg, _ = trainer.load_checkpoint(args.ckpt)
        if args.boxes:
            trainer.export_aolm_boxes(model, manifest, args.data,
                                      cfg.preprocess, cfg.batch_size,
                                      args.boxes)
        if args.ledger:
            append_ledger(args.ledger, args.dataset or Path(args.data).name,
                          matrix.model_id, report, config_hash(cfg))
    return 0


def _cmd_ensemble(args) -> int:
    members = [ensemble.read_csv(p) for p in args.inputs]
    voted = ensemble.soft_vote(members)
    ensemble.write_csv(voted, args.out)
    print(f"wrote {args.out} ({len(voted)} samples, "
          f"{voted.num_classes} classes, {len(members)} members)")
    if voted.true_labels is not None:
        report = macro_report(confusion(
            voted.true_labels, ensemble.decide(voted), voted.num_classes))
        print(format_report(report), end="")
        if args.ledger:
            digest = hashlib.sha256(",".join(sorted(
                m.model_id for m in members)).encode()).hexdigest()[:12]
            append_ledger(args.ledger, args.dataset or "unknown",
                          voted.model_id, report, digest)
    return 0


def _cmd_gradcam(args) -> int:
    model, cfg, labels = trainer.load_checkpoint(args.ckpt)
    with Image.open(args.image) as img:
        pixels = np.asarray(img.convert("RGB"))
    resized = aspect_resize(pixels, cfg.preprocess.short_side)
    cropped = center_crop(resized, cfg.preprocess.crop)
    tensor = torch.from_numpy(normalize(cropped, cfg.preprocess.channel_mean,
                                        cfg.preprocess.channel_std))
    heatmap = explain.grad_cam(model, tensor, args.target_class)
    explain.overlay(heatmap, cropped, args.out)
    print(f"class {labels.names[heatmap.target_class]} "
          f"({heatmap.target_class}) via {heatmap.source_layer} -> {args.out}")
    return 0


def _cmd_report(args) -> int:
    text = format_comparison(read_ledger(args.ledger), args.dataset)
    if args.probs:
        names = None
        if args.classes:
            names = Path(args.classes).read_text(encoding="utf-8").split()
        text += "\n" + format_worst(args.probs, args.worst_k, names)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pestclf",
        description="Fine-grained pest image classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="build train/val/test manifests")
    p.add_argument("--root", required=True)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--model", choices=trainer.MODEL_TAGS)
    p.add_argument("--config", help="flat key = value run-config file")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--splits", required=True, help="dir with *.txt manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and export probabilities")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--split", default="test", choices=data.SPLIT_NAMES)
    p.add_argument("--export", help="probability CSV output path")
    p.add_argument("--ledger", help="results ledger to append to")
    p.add_argument("--dataset", help="dataset name for the ledger")
    p.add_argument("--boxes", help="dump mined object boxes (mmal only)")
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ensemble", help="soft-vote member probability CSVs")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ledger")
    p.add_argument("--dataset")
    p.set_defaults(func=_cmd_ensemble)

    p = sub.add_parser("gradcam", help="write a class-activation overlay")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="target_class", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gradcam)

    p = sub.add_parser("report", help="format comparison and worst-class tables")
    p.add_argument("--ledger", required=True)
    p.add_argument("--dataset")
    p.add_argument("--probs", help="probability CSV for the worst-class table")
    p.add_argument("--classes", help="classes.txt for names in the worst table")
    p.add_argument("--worst-k", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PestclfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
