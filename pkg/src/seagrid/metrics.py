"""Confusion matrices, per-class precision/recall/F1 and the support-weighted overall F1."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .kernels import confusion_counts


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, truth, pred, n_classes: int) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if truth.shape != pred.shape:
            raise ValueError("truth and prediction lengths differ")
        for arr in (truth, pred):
            if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
                raise ValueError(f"class id out of range for {n_classes} classes")
        return cls(confusion_counts(truth, pred, n_classes))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, truth: int, pred: int) -> ConfusionMatrix:
    n = cm.n_classes
    if not (0 <= truth < n and 0 <= pred < n):
        raise ValueError(f"class id out of range: truth={truth}, pred={pred}, classes={n}")
    cm.counts[truth, pred] += 1
    return cm


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def per_class_metrics(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class precision, recall and F1 as fractions; 0 wherever undefined."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    pred_tot = c.sum(axis=0)
    true_tot = c.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    f1 = np.array([f1_score(p, r) for p, r in zip(precision, recall)])
    return precision, recall, f1


def overall_f1(f1s, supports) -> float:
    f1s = np.asarray(f1s, dtype=np.float64)
    supports = np.asarray(supports, dtype=np.float64)
    total = supports.sum()
    if total <= 0:
        raise ValueError("overall F1 needs a positive total support")
    return float((f1s * supports).sum() / total)


def collapse_binary(cm: ConfusionMatrix, seagrass_ids) -> ConfusionMatrix:
    """Merge the given seagrass classes into one; everything else maps to class 0."""
    return collapse(cm, [(0, [i for i in range(cm.n_classes) if i not in set(seagrass_ids)]), (1, list(seagrass_ids))])


def collapse(cm: ConfusionMatrix, groups) -> ConfusionMatrix:
    """General merge: ``groups`` is a list of ``(new_id, [old ids])`` covering every class."""
    seagrass = [ids for _, ids in groups]
    flat = [i for ids in seagrass for i in ids]
    if sorted(flat) != list(range(cm.n_classes)):
        raise ValueError("collapse groups must partition the class ids")
    if any(not ids for ids in seagrass):
        raise ValueError("collapse groups must be non-empty")
    n = len(groups)
    mapping = np.zeros(cm.n_classes, dtype=np.int64)
    for new, ids in groups:
        mapping[ids] = new
    proj = np.zeros((cm.n_classes, n), dtype=np.int64)
    proj[np.arange(cm.n_classes), mapping] = 1
    return ConfusionMatrix(proj.T @ cm.counts @ proj)


@dataclass
class MetricReport:
    class_names: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    overall: float
    confusion: list[list[int]]

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, class_names) -> "MetricReport":
        p, r, f = per_class_metrics(cm)
        support = cm.counts.sum(axis=1)
        pct = lambda arr: [round(100.0 * float(x), 2) for x in arr]  # noqa: E731
        return cls(
            list(class_names),
            pct(p),
            pct(r),
            pct(f),
            [int(s) for s in support],
            round(100.0 * overall_f1(f, support), 2),
            cm.counts.astype(int).tolist(),
        )

    def to_dict(self) -> dict:
        return {
            "classes": {
                name: {"precision": p, "recall": r, "f1": f, "support": s}
                for name, p, r, f, s in zip(self.class_names, self.precision, self.recall, self.f1, self.support)
            },
            "class_order": self.class_names,
            "overall_f1": self.overall,
            "confusion": self.confusion,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        """Plain-text table: one Prec./Recall/F1 block per class, then Overall."""
        width = max(8, *(len(n) for n in self.class_names))
        head1 = " ".join(f"{n:^{3 * 7 + 2}}" for n in self.class_names)
        head2 = " ".join(f"{'Prec.':>7}{'Recall':>8}{'F1':>8}" for _ in self.class_names)
        vals = " ".join(f"{p:7.2f}{r:8.2f}{f:8.2f}" for p, r, f in zip(self.precision, self.recall, self.f1))
        return "\n".join(
            [
                f"{'':{width}} {head1} {'Overall':>8}",
                f"{'':{width}} {head2} {'F1':>8}",
                f"{'':{width}} {vals} {self.overall:8.2f}",
            ]
        )
