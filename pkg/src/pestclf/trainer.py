"""Training loop: loss, optimizers, schedules, early stopping, export.

Per-model defaults (optimizer, schedule, batch size, epochs, dropout, input
size) live in MODEL_DEFAULTS; a flat ``key = value`` run-config file can
override any of them. Training validates after every epoch, checkpoints on
each new best validation accuracy, and stops once the accuracy has not
improved for ``patience`` consecutive epochs. The best checkpoint, not the
last, is what evaluation uses.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .data import LabelSpace, SplitManifest, stream_batches
from .ensemble import ProbMatrix, write_csv
from .errors import LabelSpaceMismatch, NonFiniteLoss, PestclfError
from .fpn import FPNClassifier
from .metrics import MetricsReport, confusion, macro_report
from .mmal import MmalNet
from .preprocess import PreprocessSpec
from .ran import ResidualAttentionNet
from .resnet import ImageClassifier, ResNet50Classifier

log = logging.getLogger(__name__)

MODEL_TAGS = ("resnet50", "ran", "fpn", "mmal")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # "adam" or "sgd"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer kind must be adam or sgd, got {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0,1)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0,1)")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "exponential"  # "exponential" or "multistep"
    decay_rate: float = 0.96
    milestones: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("exponential", "multistep"):
            raise ValueError(f"unknown scheduler kind {self.kind!r}")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0,1]")


@dataclass
class TrainRunConfig:
    model: str
    optimizer: OptimizerConfig
    schedule: ScheduleConfig
    preprocess: PreprocessSpec
    batch_size: int
    max_epochs: int
    patience: int = 10
    drop_rate: float = 0.0
    seed: int = 0
    pretrained_backbone: str | None = None
    model_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODEL_TAGS:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODEL_TAGS}")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")


# Per-model training settings: (optimizer, schedule, batch, epochs, dropout,
# short side, crop). RAN trains from random init at a high SGD rate; the
# warm-started models use gentler Adam steps.
MODEL_DEFAULTS = {
    "resnet50": (OptimizerConfig("adam", 1e-4, weight_decay=1e-5),
                 ScheduleConfig("exponential", 0.96), 64, 100, 0.3, 256, 224),
    "ran": (OptimizerConfig("sgd", 0.1, momentum=0.9, weight_decay=0.0),
            ScheduleConfig("multistep", 0.1), 32, 100, 0.0, 256, 224),
    "fpn": (OptimizerConfig("adam", 1e-4, weight_decay=1e-5),
            ScheduleConfig("exponential", 0.96), 32, 100, 0.0, 256, 224),
    "mmal": (OptimizerConfig("sgd", 1e-3, momentum=0.9, weight_decay=1e-5),
             ScheduleConfig("multistep", 0.1), 6, 150, 0.0, 448, 448),
}


def default_config(model: str, seed: int = 0) -> TrainRunConfig:
    """Table defaults for one model tag."""
    if model not in MODEL_DEFAULTS:
        raise ValueError(f"unknown model {model!r}; choose from {MODEL_TAGS}")
    opt, sched, batch, epochs, drop, short, crop = MODEL_DEFAULTS[model]
    if sched.kind == "multistep" and not sched.milestones:
        # milestones are not fixed anywhere; half and three-quarters of the run
        sched = dataclasses.replace(
            sched, milestones=(epochs // 2, 3 * epochs // 4))
    return TrainRunConfig(model=model, optimizer=opt, schedule=sched,
                          preprocess=PreprocessSpec(short, crop),
                          batch_size=batch, max_epochs=epochs,
                          drop_rate=drop, seed=seed)


def build_model(cfg: TrainRunConfig, num_classes: int) -> ImageClassifier:
    """Instantiate the model named by cfg, honoring its options."""
    opts = cfg.model_options
    pretrained = cfg.pretrained_backbone
    if cfg.model == "resnet50":
        return ResNet50Classifier(num_classes, cfg.drop_rate, pretrained)
    if cfg.model == "ran":
        return ResidualAttentionNet(
            num_classes, cfg.drop_rate,
            modules_per_stage=tuple(
                int(v) for v in opts.get("modules_per_stage", (1, 1, 1))),
            stage_downsamples=tuple(
                int(v) for v in opts.get("stage_downsamples", (3, 2, 1))))
    if cfg.model == "fpn":
        return FPNClassifier(num_classes, d=int(opts.get("pyramid_width", 256)),
                             drop_rate=cfg.drop_rate,
                             per_level_heads=bool(opts.get("per_level_heads", False)),
                             pretrained_path=pretrained)
    if cfg.model == "mmal":
        return MmalNet(num_classes,
                       part_size=int(opts.get("part_size", 224)),
                       window_sizes=tuple(
                           tuple(int(d) for d in w)
                           for w in opts.get("appm_windows",
                                             ((2, 2), (3, 3), (4, 4)))),
                       top_k=tuple(int(k) for k in opts.get("appm_top_k",
                                                            (3, 2, 2))),
                       nms_iou=float(opts.get("nms_iou", 0.25)),
                       drop_rate=cfg.drop_rate, pretrained_path=pretrained)
    raise ValueError(f"unknown model {cfg.model!r}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean -log softmax(logits)[label], computed via log-sum-exp."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long,
                             device=logits.device).reshape(-1)
    lse = torch.logsumexp(logits, dim=1)
    picked = logits.gather(1, labels.unsqueeze(1)).squeeze(1)
    return (lse - picked).mean()


def step_schedule(epoch: int, base_lr: float, cfg: ScheduleConfig) -> float:
    """Learning rate for a (0-based) epoch under the configured schedule."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.kind == "exponential":
        return base_lr * cfg.decay_rate ** epoch
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return base_lr * cfg.decay_rate ** passed


@dataclass
class TrainHistory:
    """Per-epoch trace of one run; best_epoch indexes the max val accuracy."""

    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build_optimizer(model: torch.nn.Module, cfg: OptimizerConfig):
    if cfg.kind == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                betas=(cfg.beta1, cfg.beta2),
                                weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                           momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _evaluate_accuracy(model: ImageClassifier, manifest: SplitManifest,
                       root, prep: PreprocessSpec, batch_size: int,
                       num_workers: int = 0) -> float:
    """Plain accuracy of the model's predictions over a manifest."""
    model.eval()
    hits = 0
    total = 0
    with torch.no_grad():
        for images, labels in stream_batches(manifest, root, prep, batch_size,
                                             "eval", seed=0,
                                             num_workers=num_workers):
            proba = model.predict_proba(torch.from_numpy(images))
            hits += int((proba.argmax(dim=1).numpy() == labels).sum())
            total += len(labels)
    return hits / total if total else 0.0


def save_checkpoint(path, model: ImageClassifier, cfg: TrainRunConfig,
                    label_space: LabelSpace) -> None:
    torch.save({
        "format_version": 1,
        "model": cfg.model,
        "classes": list(label_space.names),
        "config": config_to_dict(cfg),
        "state": model.state_dict(),
    }, path)


def load_checkpoint(path) -> tuple[ImageClassifier, TrainRunConfig, LabelSpace]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise PestclfError(f"load_checkpoint: cannot read {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != 1:
        raise PestclfError(f"load_checkpoint: unsupported checkpoint {path}")
    cfg = config_from_dict(payload["config"])
    labels = LabelSpace(tuple(payload["classes"]))
    model = build_model(cfg, labels.count)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, cfg, labels


def train(cfg: TrainRunConfig, label_space: LabelSpace,
          train_manifest: SplitManifest, val_manifest: SplitManifest,
          root, out_dir, num_workers: int = 0,
          stop_fn=None) -> tuple[Path, TrainHistory]:
    """Run the epoch loop and return (best checkpoint path, history).

    ``stop_fn(history)``, when given, is consulted after each epoch and may
    end the run early (used for fixed-target smoke runs); the spec'd early
    stopping on validation accuracy always applies.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg, label_space.count)
    optimizer = _build_optimizer(model, cfg.optimizer)
    base_lr = cfg.optimizer.learning_rate
    history = TrainHistory()
    ckpt_path = out_dir / f"{cfg.model}_best.pt"
    best_acc = -math.inf
    unimproved = 0

    for epoch in range(cfg.max_epochs):
        lr = step_schedule(epoch, base_lr, cfg.schedule)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        losses = []
        hits = 0
        seen = 0
        for images, labels in stream_batches(
                train_manifest, root, cfg.preprocess, cfg.batch_size,
                "train", cfg.seed, epoch, num_workers):
            x = torch.from_numpy(images)
            y = torch.from_numpy(labels)
            branches = model.training_branches(x, y)
            loss = sum(cross_entropy(lg, tg) for lg, tg in branches)
            if not torch.isfinite(loss):
                dump = out_dir / "nonfinite_dump.pt"
                torch.save({"state": model.state_dict(), "epoch": epoch,
                            "losses_so_far": losses}, dump)
                raise NonFiniteLoss(
                    f"train: non-finite loss at epoch {epoch}; state in {dump}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            hits += int((branches[0][0].argmax(dim=1) == y).sum())
            seen += len(y)

        val_acc = _evaluate_accuracy(model, val_manifest, root, cfg.preprocess,
                                     cfg.batch_size, num_workers)
        history.train_loss.append(float(np.mean(losses)) if losses else math.nan)
        history.train_acc.append(hits / seen if seen else 0.0)
        history.val_acc.append(val_acc)
        history.learning_rate.append(lr)
        log.info("epoch %d: loss %.4f train_acc %.4f val_acc %.4f lr %.2e",
                 epoch, history.train_loss[-1], history.train_acc[-1],
                 val_acc, lr)

        if val_acc > best_acc:
            best_acc = val_acc
            history.best_epoch = epoch
            unimproved = 0
            save_checkpoint(ckpt_path, model, cfg, label_space)
        else:
            unimproved += 1
        if stop_fn is not None and stop_fn(history):
            break
        if unimproved >= cfg.patience:
            log.info("early stop: no val improvement for %d epochs", cfg.patience)
            break

    (out_dir / "history.json").write_text(
        json.dumps(history.to_dict(), indent=2) + "\n", encoding="utf-8")
    return ckpt_path, history


def predict_matrix(model: ImageClassifier, manifest: SplitManifest, root,
                   prep: PreprocessSpec, batch_size: int, model_id: str,
                   num_workers: int = 0) -> ProbMatrix:
    """Eval-mode probabilities over a manifest, in manifest order.

    The export contract needs one row per manifest record, so an undecodable
    image here is an error rather than a skip.
    """
    model.eval()
    rows = []
    with torch.no_grad():
        for images, _ in stream_batches(manifest, root, prep, batch_size,
                                        "eval", seed=0, num_workers=num_workers):
            proba = model.predict_proba(torch.from_numpy(images))
            rows.append(proba.double().numpy())
    probs = np.concatenate(rows) if rows else np.zeros((0, 0))
    if probs.shape[0] != len(manifest.records):
        raise PestclfError(
            f"predict_matrix: decoded {probs.shape[0]} of "
            f"{len(manifest.records)} records; remove undecodable images "
            f"from the {manifest.split_name} manifest (see warnings above)")
    return ProbMatrix(model_id, [r.path for r in manifest.records], probs,
                      manifest.labels())


def export_aolm_boxes(model, manifest: SplitManifest, root,
                      prep: PreprocessSpec, batch_size: int, out_path) -> None:
    """Dump the multi-branch model's mined boxes, one text line per image."""
    from .mmal import MmalNet, format_box_lines
    if not isinstance(model, MmalNet):
        raise PestclfError("export_aolm_boxes: checkpoint is not an mmal model")
    model.eval()
    results = []
    with torch.no_grad():
        for images, _ in stream_batches(manifest, root, prep, batch_size,
                                        "eval", seed=0):
            results.extend(model(torch.from_numpy(images), phase="test").boxes)
    if len(results) != len(manifest.records):
        raise PestclfError(
            f"export_aolm_boxes: decoded {len(results)} of "
            f"{len(manifest.records)} records; lines would misalign")
    paths = [r.path for r in manifest.records]
    Path(out_path).write_text(format_box_lines(paths, results),
                              encoding="utf-8")


def evaluate_export(checkpoint, manifest: SplitManifest, root,
                    out_csv=None, label_space: LabelSpace | None = None,
                    batch_size: int | None = None, num_workers: int = 0
                    ) -> tuple[ProbMatrix, MetricsReport]:
    """Load a checkpoint, predict over a manifest, export CSV, report metrics."""
    model, cfg, ckpt_labels = load_checkpoint(checkpoint)
    if label_space is not None and label_space.names != ckpt_labels.names:
        raise LabelSpaceMismatch(
            "evaluate_export: checkpoint classes differ from the dataset's")
    labels = manifest.labels()
    if labels.size and labels.max() >= ckpt_labels.count:
        raise LabelSpaceMismatch(
            f"evaluate_export: manifest labels exceed checkpoint's "
            f"{ckpt_labels.count} classes")
    matrix = predict_matrix(model, manifest, root, cfg.preprocess,
                            batch_size or cfg.batch_size, cfg.model,
                            num_workers)
    if out_csv is not None:
        write_csv(matrix, out_csv)
    predictions = np.argmax(matrix.probs, axis=1)
    report = macro_report(confusion(labels, predictions, ckpt_labels.count))
    return matrix, report


# --- run-config file (flat key = value text) ---------------------------------

_LIST_KEYS = {"milestones", "appm_top_k", "channel_mean", "channel_std",
              "modules_per_stage", "stage_downsamples"}


def config_to_dict(cfg: TrainRunConfig) -> dict:
    """Flatten a config to the run-file key set (deterministic order)."""
    out = {
        "model": cfg.model,
        "optimizer": cfg.optimizer.kind,
        "learning_rate": cfg.optimizer.learning_rate,
        "beta1": cfg.optimizer.beta1,
        "beta2": cfg.optimizer.beta2,
        "momentum": cfg.optimizer.momentum,
        "weight_decay": cfg.optimizer.weight_decay,
        "scheduler": cfg.schedule.kind,
        "decay_rate": cfg.schedule.decay_rate,
        "milestones": list(cfg.schedule.milestones),
        "batch_size": cfg.batch_size,
        "max_epochs": cfg.max_epochs,
        "patience": cfg.patience,
        "drop_rate": cfg.drop_rate,
        "short_side": cfg.preprocess.short_side,
        "input_size": cfg.preprocess.crop,
        "channel_mean": list(cfg.preprocess.channel_mean),
        "channel_std": list(cfg.preprocess.channel_std),
        "seed": cfg.seed,
        "pretrained_backbone": cfg.pretrained_backbone or "",
    }
    for key, value in sorted(cfg.model_options.items()):
        out[key] = value
    return out


def config_from_dict(data: dict) -> TrainRunConfig:
    data = dict(data)
    if "crop" in data:  # accepted alias for the Table-style key
        data["input_size"] = data.pop("crop")
    cfg = default_config(data["model"], seed=int(data.get("seed", 0)))
    merged = config_to_dict(cfg)
    merged.update(data)
    optimizer = OptimizerConfig(
        merged["optimizer"], float(merged["learning_rate"]),
        float(merged["beta1"]), float(merged["beta2"]),
        float(merged["momentum"]), float(merged["weight_decay"]))
    schedule = ScheduleConfig(
        merged["scheduler"], float(merged["decay_rate"]),
        tuple(int(m) for m in merged["milestones"]))
    prep = PreprocessSpec(int(merged["short_side"]), int(merged["input_size"]),
                          "eval", tuple(float(v) for v in merged["channel_mean"]),
                          tuple(float(v) for v in merged["channel_std"]))
    known = {"model", "optimizer", "learning_rate", "beta1", "beta2", "momentum",
             "weight_decay", "scheduler", "decay_rate", "milestones",
             "batch_size", "max_epochs", "patience", "drop_rate", "short_side",
             "input_size", "channel_mean", "channel_std", "seed",
             "pretrained_backbone"}
    options = {k: v for k, v in merged.items() if k not in known}
    return TrainRunConfig(
        model=merged["model"], optimizer=optimizer, schedule=schedule,
        preprocess=prep, batch_size=int(merged["batch_size"]),
        max_epochs=int(merged["max_epochs"]), patience=int(merged["patience"]),
        drop_rate=float(merged["drop_rate"]), seed=int(merged["seed"]),
        pretrained_backbone=merged["pretrained_backbone"] or None,
        model_options=options)


def dump_run_config(cfg: TrainRunConfig) -> str:
    """Serialize as the flat key = value text format."""
    lines = []
    for key, value in config_to_dict(cfg).items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _parse_value(key: str, raw: str):
    if key in _LIST_KEYS:
        return [v.strip() for v in raw.split(",") if v.strip()]
    if key == "appm_windows":  # e.g. "2x2,3x3,4x4"
        return tuple(tuple(int(d) for d in w.split("x")) for w in raw.split(","))
    if key == "per_level_heads":
        return raw.strip().lower() in ("1", "true", "yes")
    return raw.strip()


def parse_run_config(path, model: str | None = None,
                     seed: int | None = None) -> TrainRunConfig:
    """Read a flat key = value run-config file, filling defaults per model."""
    data: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8")
                                  .splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise PestclfError(f"parse_run_config: {path}:{lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        data[key.strip()] = _parse_value(key.strip(), raw)
    if model is not None:
        data["model"] = model
    if "model" not in data:
        raise PestclfError("parse_run_config: no model given in file or flags")
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data)
