"""Soft-voting combiner over per-model probability matrices.

The ensemble probability of class j is the plain average of the members'
probabilities for j. Members are exchanged as CSV files with the header
``sample_id,true_label,p_0,...,p_{n-1}``, probabilities printed with 9
significant digits, rows in manifest order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MemberMismatch

ROW_SUM_TOLERANCE = 1e-5


@dataclass
class ProbMatrix:
    """One model's class probabilities for an ordered sample set."""

    model_id: str
    sample_ids: list[str]
    probs: np.ndarray             # N x n, rows sum to 1
    true_labels: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] != len(self.sample_ids):
            raise ValueError(
                f"probs shape {self.probs.shape} does not match "
                f"{len(self.sample_ids)} sample ids")
        if self.probs.size:
            if self.probs.min() < 0.0 or self.probs.max() > 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
            sums = self.probs.sum(axis=1)
            if np.abs(sums - 1.0).max() > ROW_SUM_TOLERANCE:
                raise ValueError("probability rows must sum to 1 within 1e-5")
        if self.true_labels is not None:
            self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
            if len(self.true_labels) != len(self.sample_ids):
                raise ValueError("true_labels length mismatch")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return len(self.sample_ids)


def _canonical_mean(stack: np.ndarray) -> np.ndarray:
    """Mean over axis 0, bitwise invariant to the member order.

    The m values of each cell are sorted before a pairwise-tree summation,
    so permuting members cannot change the result, and averaging m identical
    members returns them bit-exactly for any power-of-two m.
    """
    stack = np.sort(stack, axis=0)
    layers = [stack[i] for i in range(stack.shape[0])]
    while len(layers) > 1:
        paired = [layers[i] + layers[i + 1] for i in range(0, len(layers) - 1, 2)]
        if len(layers) % 2:
            paired.append(layers[-1])
        layers = paired
    return layers[0] / stack.shape[0]


def soft_vote(members: list[ProbMatrix]) -> ProbMatrix:
    """Average member probabilities per sample (equal weights)."""
    if not members:
        raise MemberMismatch("soft_vote: need at least one member")
    first = members[0]
    for member in members[1:]:
        if member.sample_ids != first.sample_ids:
            raise MemberMismatch(
                f"soft_vote: {member.model_id} has a different sample set "
                f"than {first.model_id}")
        if member.num_classes != first.num_classes:
            raise MemberMismatch(
                f"soft_vote: {member.model_id} has {member.num_classes} classes, "
                f"expected {first.num_classes}")
        if first.true_labels is not None and member.true_labels is not None \
                and not np.array_equal(member.true_labels, first.true_labels):
            raise MemberMismatch(
                f"soft_vote: {member.model_id} disagrees on true labels")
    if len(members) == 1:
        return ProbMatrix("ensemble:" + first.model_id, list(first.sample_ids),
                          first.probs.copy(), first.true_labels)
    stack = np.stack([m.probs for m in members])
    averaged = _canonical_mean(stack)
    model_id = "ensemble:" + "+".join(sorted(m.model_id for m in members))
    return ProbMatrix(model_id, list(first.sample_ids), averaged,
                      first.true_labels)


def decide(matrix: ProbMatrix) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    return np.argmax(matrix.probs, axis=1)


def write_csv(matrix: ProbMatrix, path: str | Path) -> None:
    """Write the cross-model exchange CSV (9 significant digits)."""
    n = matrix.num_classes
    header = "sample_id,true_label," + ",".join(f"p_{j}" for j in range(n))
    lines = [header]
    labels = matrix.true_labels
    for i, sample_id in enumerate(matrix.sample_ids):
        label = int(labels[i]) if labels is not None else -1
        probs = ",".join(f"{p:.9g}" for p in matrix.probs[i])
        lines.append(f"{sample_id},{label},{probs}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path: str | Path, model_id: str | None = None) -> ProbMatrix:
    """Read a probability CSV written by :func:`write_csv`."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("sample_id,true_label,"):
        raise MemberMismatch(f"read_csv: {path} is not a probability CSV")
    n = len(lines[0].split(",")) - 2
    sample_ids, labels, rows = [], [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        fields = line.split(",")
        # sample ids may contain commas only if quoted; we keep them plain,
        # so everything before the trailing n+1 numeric fields is the id
        sample_ids.append(",".join(fields[:len(fields) - n - 1]))
        labels.append(int(fields[-n - 1]))
        rows.append([float(v) for v in fields[-n:]])
    labels_arr = np.array(labels, dtype=np.int64)
    true_labels = None if (labels_arr < 0).any() else labels_arr
    return ProbMatrix(model_id or path.stem, sample_ids,
                      np.array(rows, dtype=np.float64), true_labels)
