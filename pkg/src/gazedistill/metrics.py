"""Long-tailed evaluation: per-class and group accuracies, multiclass
correlation, ranking AUC, weighted F1, seed-comparison t-tests, and the
JSON metrics report."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import stdtr
from scipy.stats import rankdata

from .errors import DataError, MetricError
from .manifest import GROUPS, ClassGrouping, DatasetManifest, load_image
from .student import student_forward


def confusion_matrix(labels, predictions, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.intp)
    p = np.asarray(predictions, dtype=np.intp)
    if y.shape != p.shape:
        raise MetricError(f"{y.shape[0]} labels vs {p.shape[0]} predictions")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def per_class_accuracy(cm) -> np.ndarray:
    """Recall per class; a class with no true samples is an error."""
    cm = np.asarray(cm)
    row = cm.sum(axis=1)
    if (row == 0).any():
        empty = int(np.argmax(row == 0))
        raise MetricError(f"class {empty} has no true samples")
    return np.diag(cm) / row


def balanced_accuracy(cm) -> float:
    return float(per_class_accuracy(cm).mean())


def average_accuracy(cm) -> float:
    """Unweighted mean of per-class accuracies (the balanced-split headline)."""
    return float(per_class_accuracy(cm).mean())


def group_averages(per_class, grouping: ClassGrouping) -> dict:
    """Mean recall within each class group; empty groups come back absent."""
    acc = np.asarray(per_class, dtype=np.float64)
    out = {}
    for name in GROUPS:
        idx = grouping.indices(name)
        out[name] = float(acc[list(idx)].mean()) if idx else None
    return out


def mcc_multiclass(cm) -> float:
    """Generalized correlation between true and predicted assignments.

    Degenerate marginals (all predictions one class, or all truths one
    class) make the denominator zero; that reads as no correlation, 0.0.
    """
    cm = np.asarray(cm, dtype=np.float64)
    t = cm.sum(axis=1)
    p = cm.sum(axis=0)
    s = cm.sum()
    c = np.trace(cm)
    num = c * s - float(t @ p)
    den_sq = (s * s - float(p @ p)) * (s * s - float(t @ t))
    if den_sq <= 0:
        return 0.0
    return float(num / np.sqrt(den_sq))


def weighted_f1(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    row = cm.sum(axis=1)
    col = cm.sum(axis=0)
    diag = np.diag(cm)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(col > 0, diag / col, 0.0)
        recall = np.where(row > 0, diag / row, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    return float((row / row.sum() * f1).sum())


def auc_macro_ovr(scores, labels, n_classes: int | None = None):
    """Macro one-vs-rest ranking AUC with average-rank tie handling.

    Returns (auc, excluded): classes without both a positive and a
    negative sample cannot be ranked and are skipped but named.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if s.ndim != 2 or s.shape[0] != y.shape[0]:
        raise MetricError(f"scores {s.shape} do not match {y.shape[0]} labels")
    k = n_classes if n_classes is not None else s.shape[1]
    aucs = []
    excluded = []
    for cls in range(k):
        pos = y == cls
        n_pos = int(pos.sum())
        n_neg = int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            excluded.append(cls)
            continue
        ranks = rankdata(s[:, cls])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        aucs.append(u / (n_pos * n_neg))
    if not aucs:
        raise MetricError("no class has both positive and negative samples")
    return float(np.mean(aucs)), tuple(excluded)


def welch_t_test(a, b):
    """Unequal-variance t-test; returns (t, df, two-sided p)."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise MetricError(f"need >= 2 samples per side, got {x.size} and {y.size}")
    vx = x.var(ddof=1)
    vy = y.var(ddof=1)
    if vx == 0 and vy == 0:
        raise MetricError("both samples have zero variance")
    sx = vx / x.size
    sy = vy / y.size
    t = (x.mean() - y.mean()) / np.sqrt(sx + sy)
    df = (sx + sy) ** 2 / (sx**2 / (x.size - 1) + sy**2 / (y.size - 1))
    p = 2.0 * stdtr(df, -abs(t))
    return float(t), float(df), float(p)


@dataclass(frozen=True)
class MetricsReport:
    split: str
    seed: int
    per_class: tuple
    groups: dict
    avg_acc: float
    balanced_acc: float
    mcc: float
    auc_macro_ovr: float
    weighted_f1: float
    n_samples: int

    def to_json(self) -> str:
        payload = {
            "split": self.split,
            "seed": self.seed,
            "per_class": list(self.per_class),
            "groups": dict(self.groups),
            "avg_acc": self.avg_acc,
            "balanced_acc": self.balanced_acc,
            "mcc": self.mcc,
            "auc_macro_ovr": self.auc_macro_ovr,
            "weighted_f1": self.weighted_f1,
            "n_samples": self.n_samples,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def report_from_json(text: str) -> MetricsReport:
    raw = json.loads(text)
    return MetricsReport(
        split=raw["split"],
        seed=raw["seed"],
        per_class=tuple(raw["per_class"]),
        groups={g: raw["groups"].get(g) for g in GROUPS},
        avg_acc=raw["avg_acc"],
        balanced_acc=raw["balanced_acc"],
        mcc=raw["mcc"],
        auc_macro_ovr=raw["auc_macro_ovr"],
        weighted_f1=raw["weighted_f1"],
        n_samples=raw["n_samples"],
    )


def save_report(report: MetricsReport, path) -> None:
    Path(path).write_text(report.to_json() + "\n", encoding="utf-8")


def load_report(path) -> MetricsReport:
    return report_from_json(Path(path).read_text(encoding="utf-8"))


def report_from_scores(scores, labels, grouping: ClassGrouping, split: str,
                       seed: int) -> MetricsReport:
    """Assemble the full report from raw class scores."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    preds = s.argmax(axis=1)
    cm = confusion_matrix(y, preds, s.shape[1])
    acc = per_class_accuracy(cm)
    auc, _ = auc_macro_ovr(s, y, s.shape[1])
    return MetricsReport(
        split=split,
        seed=seed,
        per_class=tuple(float(v) for v in acc),
        groups=group_averages(acc, grouping),
        avg_acc=average_accuracy(cm),
        balanced_acc=balanced_accuracy(cm),
        mcc=mcc_multiclass(cm),
        auc_macro_ovr=auc,
        weighted_f1=weighted_f1(cm),
        n_samples=int(y.size),
    )


def _stable_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def evaluate(student, manifest: DatasetManifest, split: str,
             batch_size: int = 256) -> MetricsReport:
    """Run student inference over a held-out split and score it."""
    if split not in ("balanced_test", "test"):
        raise DataError(f"unknown evaluation split '{split}'")
    records = manifest.split_records(split)
    if not records:
        raise DataError(f"split '{split}' has no records")
    cfg = student.config
    # images must enter the graph at the same width the weights use
    dtype = next(iter(student.params.values())).data.dtype
    labels = np.array([manifest.label_index(r.label) for r in records], dtype=np.intp)
    scores = np.empty((len(records), cfg.n_classes), dtype=np.float64)
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        x = np.stack([load_image(r, manifest.root) for r in chunk]).astype(dtype)
        z, _ = student_forward(x, student.params, cfg)
        scores[start : start + len(chunk)] = _stable_softmax_rows(z.data)
    return report_from_scores(scores, labels, manifest.grouping(), split, cfg.seed)
