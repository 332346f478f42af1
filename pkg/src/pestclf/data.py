"""Folder-per-class corpus discovery, split manifests, and batch streaming.

Dataset layout: ``root/<class_name>/<image files>``. Class indices follow the
lexicographic order of the folder names, so they are stable across runs for
the same root. Manifests are plain text, one ``relative/path<SP>label_index``
per line.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import (ClassTooSmall, EmptyDataset, LabelOutOfRange,
                     MalformedLine, UnreadableRoot)
from .preprocess import PreprocessSpec, apply_chain

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class names; index of a name is its label."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if len(self.names) < 2:
            raise ValueError("a label space needs at least 2 classes")

    @property
    def count(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class ImageRecord:
    path: str  # relative to the dataset root, posix separators
    label: int


@dataclass
class SplitManifest:
    split_name: str
    records: list[ImageRecord]

    def __post_init__(self):
        if self.split_name not in SPLIT_NAMES:
            raise ValueError(f"split_name must be one of {SPLIT_NAMES}")
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError(f"duplicate paths in {self.split_name} manifest")

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


@dataclass(frozen=True)
class SplitRatios:
    train: float
    val: float
    test: float

    def __post_init__(self):
        for part in (self.train, self.val, self.test):
            if not 0.0 < part < 1.0:
                raise ValueError(f"split ratios must lie in (0,1), got {part}")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")


def _has_image(folder: Path) -> bool:
    return any(p.suffix.lower() in IMAGE_EXTENSIONS for p in folder.iterdir()
               if p.is_file())


def scan_label_space(root: str | Path) -> LabelSpace:
    """Discover classes as the lexicographically ordered subfolders of root."""
    root = Path(root)
    if not root.is_dir():
        raise UnreadableRoot(f"scan_label_space: {root} is not a readable directory")
    names = sorted(d.name for d in root.iterdir() if d.is_dir() and _has_image(d))
    if len(names) < 2:
        raise EmptyDataset(
            f"scan_label_space: {root} holds {len(names)} class folder(s); need >= 2")
    return LabelSpace(tuple(names))


def scan_records(root: str | Path, labels: LabelSpace) -> list[ImageRecord]:
    """List every image under root as an ImageRecord, sorted within each class."""
    root = Path(root)
    records = []
    for idx, name in enumerate(labels.names):
        folder = root / name
        files = sorted(p.name for p in folder.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        records.extend(ImageRecord(f"{name}/{f}", idx) for f in files)
    return records


def make_random_split(records: list[ImageRecord], ratios: SplitRatios,
                      seed: int) -> tuple[SplitManifest, SplitManifest, SplitManifest]:
    """Stratified per-class split. floor(n*ratio) per split, remainder to train.

    The same (records, ratios, seed) always produce the same membership.
    """
    if not records:
        raise ValueError("make_random_split: no records")
    by_class: dict[int, list[ImageRecord]] = {}
    for rec in records:
        by_class.setdefault(rec.label, []).append(rec)

    rng = np.random.default_rng(seed)
    parts: dict[str, list[ImageRecord]] = {name: [] for name in SPLIT_NAMES}
    for label in sorted(by_class):
        group = by_class[label]
        n = len(group)
        n_train = math.floor(n * ratios.train)
        n_val = math.floor(n * ratios.val)
        n_test = math.floor(n * ratios.test)
        if min(n_train, n_val, n_test) == 0:
            raise ClassTooSmall(
                f"make_random_split: class {label} has {n} samples; "
                f"cannot populate all three splits at {ratios}")
        n_train += n - (n_train + n_val + n_test)  # remainder to train
        order = rng.permutation(n)
        shuffled = [group[i] for i in order]
        parts["train"].extend(shuffled[:n_train])
        parts["val"].extend(shuffled[n_train:n_train + n_val])
        parts["test"].extend(shuffled[n_train + n_val:])
    return tuple(SplitManifest(name, parts[name]) for name in SPLIT_NAMES)


def save_manifest(manifest: SplitManifest, path: str | Path) -> None:
    lines = [f"{r.path} {r.label}\n" for r in manifest.records]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_fixed_split(manifest_file: str | Path, labels: LabelSpace,
                     split_name: str = "test") -> SplitManifest:
    """Parse a fixed split list of 'relative/path<SP>label_index' lines."""
    records = []
    text = Path(manifest_file).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        # paths may contain spaces; the label is everything after the last one
        head, sep, tail = line.rstrip().rpartition(" ")
        if not sep or not head:
            raise MalformedLine(f"{manifest_file}:{lineno}: expected 'path<SP>label'")
        try:
            label = int(tail)
        except ValueError:
            raise MalformedLine(
                f"{manifest_file}:{lineno}: label {tail!r} is not an integer") from None
        if not 0 <= label < labels.count:
            raise LabelOutOfRange(
                f"{manifest_file}:{lineno}: label {label} outside [0, {labels.count})")
        records.append(ImageRecord(head, label))
    return SplitManifest(split_name, records)


def _load_one(root: Path, record: ImageRecord, spec: PreprocessSpec,
              seed_key: tuple[int, ...] | None) -> np.ndarray | None:
    """Decode and preprocess one record; None (with a warning) on decode failure."""
    try:
        with Image.open(root / record.path) as img:
            pixels = np.asarray(img.convert("RGB"))
    except (OSError, ValueError) as exc:
        log.warning("skipping undecodable image %s: %s", record.path, exc)
        return None
    rng = np.random.default_rng(seed_key) if seed_key is not None else None
    return apply_chain(pixels, spec, rng)


def stream_batches(manifest: SplitManifest, root: str | Path, spec: PreprocessSpec,
                   batch_size: int, mode: str, seed: int, epoch: int = 0,
                   num_workers: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches for one epoch.

    Train mode shuffles by (seed, epoch) and random-crops; eval mode keeps
    manifest order and center-crops. Per-record crop seeds depend only on
    (seed, epoch, position), so worker count never changes the output.
    The last partial batch is emitted.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    root = Path(root)
    spec = spec.with_mode(mode)
    n = len(manifest.records)
    if mode == "train":
        order = np.random.default_rng([seed, epoch]).permutation(n)
    else:
        order = np.arange(n)

    def task(position: int):
        record = manifest.records[order[position]]
        key = (seed, epoch, position) if mode == "train" else None
        return record, _load_one(root, record, spec, key)

    if num_workers > 0:
        executor = ThreadPoolExecutor(max_workers=num_workers)
        results = executor.map(task, range(n))  # map preserves submission order
    else:
        executor = None
        results = map(task, range(n))

    try:
        images, labels = [], []
        for position, (record, image) in enumerate(results):
            if image is not None:
                images.append(image)
                labels.append(record.label)
            end_of_batch = (position + 1) % batch_size == 0 or position == n - 1
            if end_of_batch and images:
                yield np.stack(images), np.array(labels, dtype=np.int64)
                images, labels = [], []
    finally:
        if executor is not None:
            executor.shutdown(wait=False, cancel_futures=True)
