"""Thresholding, confusion accumulation, metrics, and the threshold sweep.

Conventions: the threshold comparison is >= (a probability exactly at tau is
positive); any 0/0 metric is 0, not NaN; mIoU is the macro mean of landslide
and background IoU over globally pooled counts. CLI layers multiply by 100
for reporting; everything here stays in [0, 1].
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .core_types import ConfusionCounts, MaskImage, ProbMap
from .errors import BadThreshold, LengthMismatch, ShapeMismatch

SWEEP_TAUS = (0.4, 0.5, 0.6, 0.75, 0.85, 0.9, 0.95, 0.99)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, (ProbMap, MaskImage)) else np.asarray(x)


def threshold(prob, tau: float) -> MaskImage:
    if not 0.0 <= tau <= 1.0:
        raise BadThreshold(f"tau must be in [0,1], got {tau}")
    vals = _values(prob)
    return MaskImage(values=(vals >= tau).astype(np.uint8))


def accumulate_confusion(pred, gt, acc: ConfusionCounts) -> ConfusionCounts:
    """Return acc plus this pair's pixel counts; acc itself is not mutated."""
    p = _values(pred).astype(bool)
    g = _values(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    return acc + ConfusionCounts(
        tp=int((p & g).sum()),
        fp=int((p & ~g).sum()),
        fn=int((~p & g).sum()),
        tn=int((~p & ~g).sum()),
    )


def _safe_div(num: float, den: float) -> float:
    return num / den if den != 0 else 0.0


def metrics(counts: ConfusionCounts) -> Dict[str, float]:
    precision = _safe_div(counts.tp, counts.tp + counts.fp)
    recall = _safe_div(counts.tp, counts.tp + counts.fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    iou_fg = _safe_div(counts.tp, counts.tp + counts.fp + counts.fn)
    iou_bg = _safe_div(counts.tn, counts.tn + counts.fp + counts.fn)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "miou": (iou_fg + iou_bg) / 2.0,
    }


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def detection_metrics(logits: Sequence[float], labels: Sequence[int], tau: float = 0.5):
    """Image-level confusion from sigmoid(logit) >= tau."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise LengthMismatch(f"{logits.shape} logits vs {labels.shape} labels")
    if not 0.0 <= tau <= 1.0:
        raise BadThreshold(f"tau must be in [0,1], got {tau}")
    pred = _sigmoid(logits) >= tau
    gt = labels.astype(bool)
    counts = ConfusionCounts(
        tp=int((pred & gt).sum()),
        fp=int((pred & ~gt).sum()),
        fn=int((~pred & gt).sum()),
        tn=int((~pred & ~gt).sum()),
    )
    out = metrics(counts)
    out["accuracy"] = _safe_div(counts.tp + counts.tn, counts.total)
    return out


def threshold_sweep(
    probs: Iterable, gts: Iterable, taus: Sequence[float] = SWEEP_TAUS
) -> List[Tuple[float, float, float]]:
    """Rows of (tau, f1, miou) over globally pooled counts, in given tau order."""
    if not taus:
        raise BadThreshold("taus must be non-empty")
    pairs = [( _values(p), _values(g)) for p, g in zip(probs, gts)]
    rows = []
    for tau in taus:
        acc = ConfusionCounts()
        for p, g in pairs:
            acc = accumulate_confusion(threshold(p, tau), g, acc)
        m = metrics(acc)
        rows.append((float(tau), m["f1"], m["miou"]))
    return rows
