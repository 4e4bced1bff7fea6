"""Confusion matrix, macro-averaged classification metrics, multiclass MCC and micro-average ROC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError


@dataclass
class ConfusionMatrix:
    """``counts[true, predicted]``."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, class_names: Sequence[str] | None = None) -> str:
        K = self.num_classes
        names = list(class_names) if class_names is not None else [str(k) for k in range(K)]
        lines = ["true\\pred," + ",".join(names)]
        for k in range(K):
            lines.append(names[k] + "," + ",".join(str(int(c)) for c in self.counts[k]))
        return "\n".join(lines) + "\n"


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ContractError(f"{len(preds)} predictions but {len(labels)} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"{name} out of range for {num_classes} classes")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricsReport:
    """Scalar metrics (macro-averaged over classes) plus per-class one-vs-rest values.

    ``undefined`` names metrics where some ratio had a zero denominator;
    those ratios were taken as 0.
    """

    accuracy: float
    precision: float
    recall: float
    f1: float
    tpr: float
    fpr: float
    mcc: float
    per_class: dict[str, list[float]] = field(default_factory=dict)
    undefined: set[str] = field(default_factory=set)

    SCALARS = ("accuracy", "precision", "recall", "f1", "tpr", "fpr", "mcc")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.SCALARS}

    def to_csv(self) -> str:
        lines = ["# averaging=macro", "metric,value,flag"]
        for k in self.SCALARS:
            lines.append(f"{k},{getattr(self, k):.6f},{'undefined' if k in self.undefined else ''}")
        return "\n".join(lines) + "\n"


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, bool]:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    zero = den == 0
    out = np.where(zero, 0.0, num / np.where(zero, 1.0, den))
    return out, bool(zero.any())


def multiclass_mcc(counts: np.ndarray) -> tuple[float, bool]:
    """Gorodkin's K-category correlation coefficient; ``(value, undefined)``."""
    C = np.asarray(counts, dtype=np.int64)
    s = int(C.sum())
    c = int(np.trace(C))
    t = C.sum(axis=1)  # true occurrences
    p = C.sum(axis=0)  # predictions
    num = c * s - int(np.dot(t, p))
    den = (s * s - int(np.dot(p, p))) * (s * s - int(np.dot(t, t)))
    if den == 0:
        return 0.0, True
    return num / math.sqrt(den), False


def classification_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, macro precision/recall/F1/TPR/FPR and multiclass MCC.

    Raises:
        ContractError: if the matrix holds no samples.
    """
    C = cm.counts.astype(np.int64)
    total = int(C.sum())
    if total == 0:
        raise ContractError("classification_metrics needs at least one sample")
    tp = np.diag(C)
    fp = C.sum(axis=0) - tp
    fn = C.sum(axis=1) - tp
    tn = total - tp - fp - fn
    undefined = set()
    precision, bad = _safe_div(tp, tp + fp)
    if bad:
        undefined.add("precision")
    recall, bad = _safe_div(tp, tp + fn)
    if bad:
        undefined |= {"recall", "tpr"}
    f1, bad = _safe_div(2 * precision * recall, precision + recall)
    if bad:
        undefined.add("f1")
    fpr, bad = _safe_div(fp, fp + tn)
    if bad:
        undefined.add("fpr")
    mcc, bad = multiclass_mcc(C)
    if bad:
        undefined.add("mcc")
    return MetricsReport(
        accuracy=int(tp.sum()) / total,
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
        tpr=float(recall.mean()),
        fpr=float(fpr.mean()),
        mcc=float(mcc),
        per_class=dict(precision=precision.tolist(), recall=recall.tolist(), f1=f1.tolist(), fpr=fpr.tolist()),
        undefined=undefined,
    )


@dataclass
class RocCurve:
    points: list[tuple[float, float]]
    thresholds: list[float]
    auc: float

    def to_csv(self) -> str:
        return "fpr,tpr\n" + "".join(f"{f:.6f},{t:.6f}\n" for f, t in self.points)


def roc_auc_micro(scores, labels: Sequence[int]) -> RocCurve:
    """Micro-average ROC: every (sample, class) pair becomes one binary decision.

    Thresholds sweep the distinct scores from high to low; tied scores move
    the curve diagonally, and AUC is the trapezoid area.
    """
    S = np.asarray([np.asarray(getattr(s, "data", s), dtype=np.float64) for s in scores])
    labels = np.asarray(labels, dtype=np.int64)
    if S.size == 0 or len(labels) == 0:
        raise ContractError("roc_auc_micro needs at least one sample")
    if S.ndim != 2 or S.shape[0] != len(labels):
        raise ContractError(f"scores shape {S.shape} does not match {len(labels)} labels")
    if not np.all(np.isfinite(S)):
        raise ContractError("scores must be finite")
    K = S.shape[1]
    truth = np.zeros_like(S, dtype=bool)
    truth[np.arange(len(labels)), labels] = True
    s, y = S.reshape(-1), truth.reshape(-1)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = np.cumsum(~y)[last_of_group]
    P, N = int(y.sum()), int((~y).sum())
    if P == 0 or N == 0 or K < 2:
        raise ContractError("ROC needs both positive and negative decisions")
    tpr = np.r_[0, tps] / P
    fpr = np.r_[0, fps] / N
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(list(zip(fpr.tolist(), tpr.tolist())), s[last_of_group].tolist(), auc)


# ---------------------------------------------------------------------------
# static SVG plots
# ---------------------------------------------------------------------------


def _polyline(xs, ys, x0, y0, w, h, xmax, ymin, ymax, color) -> str:
    span = (ymax - ymin) or 1.0
    pts = " ".join(f"{x0 + w * x / xmax:.2f},{y0 + h - h * (y - ymin) / span:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>'


def _svg(body: list[str], title: str) -> str:
    head = ('<svg xmlns="http://www.w3.org/2000/svg" width="420" height="360" font-family="sans-serif" font-size="12">'
            f'<rect width="420" height="360" fill="white"/><text x="210" y="20" text-anchor="middle">{title}</text>'
            '<rect x="50" y="40" width="340" height="270" fill="none" stroke="black"/>')
    return head + "".join(body) + "</svg>\n"


def roc_svg(curve: RocCurve, title: str = "micro-average ROC") -> str:
    fpr = [p[0] for p in curve.points]
    tpr = [p[1] for p in curve.points]
    body = [
        '<line x1="50" y1="310" x2="390" y2="40" stroke="#bbb" stroke-dasharray="4"/>',
        _polyline(fpr, tpr, 50, 40, 340, 270, 1.0, 0.0, 1.0, "#c0392b"),
        f'<text x="220" y="300">AUC = {curve.auc:.4f}</text>',
        '<text x="220" y="340" text-anchor="middle">false positive rate</text>',
        '<text x="15" y="175" transform="rotate(-90 15 175)" text-anchor="middle">true positive rate</text>',
    ]
    return _svg(body, title)


def loss_svg(histories: dict[str, Sequence[tuple[int, float]]], title: str = "loss") -> str:
    colors = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400", "#16a085", "#7f8c8d", "#2c3e50"]
    values = [v for h in histories.values() for _, v in h]
    if not values:
        return _svg([], title)
    ymin, ymax = min(values), max(values)
    xmax = max(e for h in histories.values() for e, _ in h) or 1
    body = []
    for i, (name, h) in enumerate(histories.items()):
        color = colors[i % len(colors)]
        body.append(_polyline([e for e, _ in h], [v for _, v in h], 50, 40, 340, 270, xmax, ymin, ymax, color))
        body.append(f'<text x="300" y="{60 + 14 * i}" fill="{color}">{name}</text>')
    body.append(f'<text x="45" y="45" text-anchor="end">{ymax:.3g}</text>')
    body.append(f'<text x="45" y="310" text-anchor="end">{ymin:.3g}</text>')
    body.append('<text x="220" y="340" text-anchor="middle">epoch</text>')
    return _svg(body, title)
