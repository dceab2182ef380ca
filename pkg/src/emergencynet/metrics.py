"""Classification quality and throughput measures.

The F1 aggregate is the unweighted mean over classes,

    F1 = (2/K) * sum_i  prec_i * sens_i / (prec_i + sens_i),

with any 0/0 term dropped to zero so absent or never-predicted classes
do not poison the mean.  A support-weighted variant is available for
skewed test sets.  Throughput is the reciprocal of the mean per-frame
latency, not the mean of per-frame rates.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with true labels on rows and predictions on columns."""
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} labels vs {p.shape} predictions")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    if t.size == 0:
        return cm
    if t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    np.add.at(cm, (t, p), 1)
    return cm


def precision_sensitivity(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class precision and sensitivity; empty denominators give 0."""
    diag = np.diag(cm).astype(np.float64)
    pred_totals = cm.sum(axis=0).astype(np.float64)
    true_totals = cm.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(pred_totals > 0, diag / pred_totals, 0.0)
        sens = np.where(true_totals > 0, diag / true_totals, 0.0)
    return prec, sens


def f1_per_class(cm: np.ndarray) -> np.ndarray:
    prec, sens = precision_sensitivity(cm)
    denom = prec + sens
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * prec * sens / denom, 0.0)


def mean_f1(cm: np.ndarray, weighted: bool = False) -> float:
    """Mean F1 over the classes of a confusion matrix.

    The default is the plain unweighted mean; ``weighted=True`` weights
    each class by its support instead (for skewed test sets).
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ValueError(f"confusion matrix must be square with K >= 2, got {cm.shape}")
    f1 = f1_per_class(cm)
    if not weighted:
        return float(f1.mean())
    support = cm.sum(axis=1)
    if support.sum() == 0:
        return 0.0
    return float((f1 * support).sum() / support.sum())


def accuracy(y_true, y_pred) -> float:
    t = np.asarray(y_true).ravel()
    p = np.asarray(y_pred).ravel()
    if t.size == 0:
        raise ValueError("no samples")
    return float((t == p).mean())


def fps(latencies: Sequence[float]) -> float:
    """Frames per second: the reciprocal of the mean per-frame latency."""
    t = np.asarray(latencies, dtype=np.float64).ravel()
    if t.size == 0:
        raise ValueError("no timing samples")
    if np.any(t <= 0):
        raise ValueError("latencies must be positive")
    return float(1.0 / t.mean())


def latency_summary(latencies: Sequence[float]) -> dict[str, float]:
    """Mean, spread and throughput of a latency sample, in seconds."""
    t = np.asarray(latencies, dtype=np.float64).ravel()
    if t.size == 0:
        raise ValueError("no timing samples")
    return {
        "samples": float(t.size),
        "mean_s": float(t.mean()),
        "std_s": float(t.std()),
        "min_s": float(t.min()),
        "p50_s": float(np.percentile(t, 50)),
        "p95_s": float(np.percentile(t, 95)),
        "max_s": float(t.max()),
        "fps": fps(t),
    }


def classification_report(
    y_true, y_pred, num_classes: int, class_names: Optional[Sequence[str]] = None
) -> str:
    """Plain-text per-class table plus the aggregate scores."""
    names = list(class_names) if class_names else [f"class{i}" for i in range(num_classes)]
    if len(names) != num_classes:
        raise ValueError(f"need {num_classes} class names, got {len(names)}")
    cm = confusion_matrix(y_true, y_pred, num_classes)
    prec, sens = precision_sensitivity(cm)
    f1 = f1_per_class(cm)
    support = cm.sum(axis=1)
    width = max(8, max(len(n) for n in names) + 1)
    lines = [f"{'':<{width}} precision  sensitivity  f1       support"]
    for i, n in enumerate(names):
        lines.append(f"{n:<{width}} {prec[i]:9.4f}  {sens[i]:11.4f}  {f1[i]:.4f}  {support[i]:7d}")
    lines.append("")
    lines.append(f"accuracy     {accuracy(y_true, y_pred):.4f}")
    lines.append(f"mean f1      {float(f1.mean()):.4f}")
    lines.append(f"weighted f1  {float((f1 * support).sum() / support.sum()):.4f}")
    return "\n".join(lines)
