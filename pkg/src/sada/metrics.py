"""Confusion matrices and micro/macro F1 for single-label multiclass output."""

import numpy as np

__all__ = ["confusion_matrix", "f1_scores"]


def confusion_matrix(y_true, y_pred, n_classes=None):
    """Counts with rows indexed by true class and columns by prediction."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size and min(y_true.min(), y_pred.min()) < 0:
        raise ValueError("labels must be non-negative")
    if n_classes is None:
        n_classes = int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def f1_scores(confusion):
    """Micro F1, macro F1 and per-class F1 from a confusion matrix.

    Per-class F1 is ``2 P R / (P + R)`` with 0/0 taken as 0. Micro F1 pools
    the counts, which for single-label data equals accuracy.

    Returns
    -------
    f1_micro : float
    f1_macro : float
    per_class : ndarray of shape (C,)
    """
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0) or np.any(cm != np.floor(cm)):
        raise ValueError("confusion matrix must hold non-negative integer counts")
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix is all zeros")
    cm = cm.astype(np.float64)
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    per_class = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    # pooled: sum FP = sum FN = total - sum TP, so F1 = TP / total
    micro = float(tp.sum() / total)
    return micro, float(per_class.mean()), per_class
