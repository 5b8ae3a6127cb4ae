"""Classification metrics: confusion matrix, precision/recall/F1, one-vs-rest ROC."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return int(np.trace(self.counts)) / self.total if self.total else float("nan")


def confusion(y_true, y_pred, n_classes: int) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError(f"y_true {t.shape} and y_pred {p.shape} must be matching 1-D arrays")
    for name, arr in (("y_true", t), ("y_pred", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise IndexError(f"{name} labels must lie in [0, {n_classes})")
    counts = np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return ConfusionMatrix(counts.astype(np.int64))


@dataclass
class ClassScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    # per-class flags marking metrics that hit a zero denominator and were set to 0
    zero_division: dict[str, list[bool]] = field(default_factory=dict)

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zero = den == 0
    out = np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=~zero)
    return out, zero


def prf1(cm: ConfusionMatrix) -> ClassScores:
    counts = cm.counts.astype(np.float64)
    if counts.size == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts)
    precision, p_zero = _safe_ratio(tp, counts.sum(axis=0))
    recall, r_zero = _safe_ratio(tp, counts.sum(axis=1))
    f1, f_zero = _safe_ratio(2.0 * precision * recall, precision + recall)
    return ClassScores(
        precision,
        recall,
        f1,
        cm.accuracy,
        {"precision": p_zero.tolist(), "recall": r_zero.tolist(), "f1": f_zero.tolist()},
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] produced point i+1; point 0 is (0, 0)
    auc: float


def roc_curve(scores, positive) -> RocCurve:
    """Binary ROC by sweeping every distinct score as a threshold (score >= t is positive)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    pos_sorted = pos[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.diff(s_sorted) != 0)
    ends = np.append(ends, s.size - 1)
    tps = np.cumsum(pos_sorted)[ends]
    fps = (ends + 1) - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, s_sorted[ends], auc)


def roc_auc(scores, y_true) -> tuple[list[RocCurve | None], float]:
    """One-vs-rest ROC per score column; macro AUC over classes with defined curves."""
    P = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    if P.ndim != 2 or P.shape[0] != y.shape[0]:
        raise ValueError(f"scores {P.shape} and labels {y.shape} disagree")
    curves: list[RocCurve | None] = []
    for c in range(P.shape[1]):
        pos = y == c
        if not pos.any() or pos.all():
            warnings.warn(f"class {c} has no {'positive' if not pos.any() else 'negative'} samples; AUC undefined",
                          RuntimeWarning, stacklevel=2)
            curves.append(None)
            continue
        curves.append(roc_curve(P[:, c], pos))
    defined = [c.auc for c in curves if c is not None]
    macro = float(np.mean(defined)) if defined else float("nan")
    return curves, macro


# ---------------------------------------------------------------------------
# report


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


@dataclass
class EvalReport:
    classes: list[str]
    confusion: ConfusionMatrix
    scores: ClassScores
    curves: list[RocCurve | None]
    macro_auc: float
    branch_accuracy: dict[str, float] = field(default_factory=dict)
    fusion_alpha: tuple[float, float] | None = None
    parameters: dict[str, int] = field(default_factory=dict)
    latency: dict | None = None

    def to_dict(self) -> dict:
        per_class = {}
        for i, name in enumerate(self.classes):
            curve = self.curves[i]
            per_class[name] = {
                "precision": float(self.scores.precision[i]),
                "recall": float(self.scores.recall[i]),
                "f1": float(self.scores.f1[i]),
                "auc": curve.auc if curve is not None else None,
                "support": int(self.confusion.counts[i].sum()),
            }
        doc = {
            "classes": self.classes,
            "n_samples": self.confusion.total,
            "accuracy": self.confusion.accuracy,
            "confusion": self.confusion.counts.tolist(),
            "per_class": per_class,
            "macro": {
                "precision": self.scores.macro_precision,
                "recall": self.scores.macro_recall,
                "f1": self.scores.macro_f1,
                "auc": self.macro_auc,
            },
            "zero_division": self.scores.zero_division,
            "branch_accuracy": self.branch_accuracy,
            "fusion_alpha": list(self.fusion_alpha) if self.fusion_alpha else None,
            "parameters": self.parameters,
            "latency": self.latency,
        }
        return _jsonable(doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def build_report(
    classes: list[str],
    y_true,
    probabilities,
    branch_logits: dict[str, np.ndarray] | None = None,
    **extra,
) -> EvalReport:
    P = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    cm = confusion(y, P.argmax(axis=1), len(classes))
    curves, macro = roc_auc(P, y)
    branch = {}
    for name, z in (branch_logits or {}).items():
        branch[name] = float((np.asarray(z).argmax(axis=1) == y).mean()) if len(y) else float("nan")
    return EvalReport(list(classes), cm, prf1(cm), curves, macro, branch, **extra)


def confusion_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + report.classes)
    for name, row in zip(report.classes, report.confusion.counts):
        w.writerow([name] + [int(v) for v in row])
    return buf.getvalue()


def roc_csv(curve: RocCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "fpr", "tpr"])
    thresholds = np.concatenate([[np.inf], curve.thresholds])
    for t, f, p in zip(thresholds, curve.fpr, curve.tpr):
        w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
    return buf.getvalue()


def write_report(report: EvalReport, out_dir: Path | str) -> list[Path]:
    """eval.json, confusion.csv and one roc_<class>.csv per class with a defined curve."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "eval.json", out / "confusion.csv"]
    written[0].write_text(report.to_json())
    written[1].write_text(confusion_csv(report))
    for name, curve in zip(report.classes, report.curves):
        if curve is None:
            continue
        path = out / f"roc_{name}.csv"
        path.write_text(roc_csv(curve))
        written.append(path)
    return written
