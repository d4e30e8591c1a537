"""Representation and classifier losses with analytic gradients.

Every loss returns a :class:`LossResult` holding the scalar value and a dict
of gradients keyed by the name of the differentiable input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_labels

__all__ = [
    "LossResult",
    "local_align_loss",
    "disc_loss",
    "softmax",
    "cross_entropy",
    "softmax_cross_entropy",
    "rep_loss",
    "finite_diff_check",
]

NORM_FLOOR = 1e-12
PROB_FLOOR = 1e-12


@dataclass
class LossResult:
    value: float
    gradients: dict = field(default_factory=dict)


def _unit(X, what):
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms < NORM_FLOOR):
        raise ValueError(f"zero-norm {what} embedding (norm < {NORM_FLOOR})")
    return X / norms, norms


def _unit_backward(g, unit, norms):
    # d(x/|x|) applied to upstream gradient g
    return (g - unit * np.sum(unit * g, axis=-1, keepdims=True)) / norms


def local_align_loss(E, E_t, k=None):
    """Sum over samples and positions of the mean squared distance between
    unit-normalized raw and transformed local embeddings.

    Parameters
    ----------
    E : ndarray of shape (N, P, D)
        Local embeddings of the raw samples at ``P`` spatial positions.
    E_t : ndarray of shape (N, k-1, P, D)
        Local embeddings of the ``k - 1`` transformed versions of each sample.
    k : int, optional
        Number of stain clusters; checked against ``E_t`` when given.

    Returns
    -------
    LossResult
        Gradients under keys ``"E"`` and ``"E_t"``.
    """
    E = np.asarray(E, dtype=np.float64)
    E_t = np.asarray(E_t, dtype=np.float64)
    if E.ndim != 3 or E_t.ndim != 4:
        raise ValueError("E must be (N, P, D) and E_t must be (N, k-1, P, D)")
    n_t = E_t.shape[1]
    if E_t.shape[0] != E.shape[0] or E_t.shape[2:] != E.shape[1:]:
        raise ValueError(f"E_t shape {E_t.shape} does not match E shape {E.shape}")
    if k is not None and k - 1 != n_t:
        raise ValueError(f"k={k} implies {k - 1} transforms, E_t holds {n_t}")
    if n_t < 1:
        raise ValueError("need at least one transformed sample (k >= 2)")

    u, nu = _unit(E, "raw")
    v, nv = _unit(E_t, "transformed")
    diff = u[:, None] - v
    value = float(np.sum(diff * diff)) / n_t
    g_u = 2.0 * diff.sum(axis=1) / n_t
    g_v = -2.0 * diff / n_t
    return LossResult(value, {"E": _unit_backward(g_u, u, nu), "E_t": _unit_backward(g_v, v, nv)})


def disc_loss(z, z_t, y, tau=0.1, include_transformed=False):
    """Supervised contrastive loss with averaged, re-normalized anchors.

    The anchor of sample ``i`` is the unit-length mean of ``z[i]`` and its
    transformed embeddings ``z_t[i]``. Positives are every raw and
    transformed embedding of the same class (``z[i]`` included). The softmax
    denominator runs over the ``N`` raw embeddings only, unless
    ``include_transformed`` is set, in which case every view is a candidate.

    Parameters
    ----------
    z : ndarray of shape (N, D)
    z_t : ndarray of shape (N, T, D)
        ``T`` may be zero, in which case anchors are the raw embeddings.
    y : array-like of shape (N,)
    tau : float
    include_transformed : bool

    Returns
    -------
    LossResult
        Gradients under keys ``"z"`` and ``"z_t"``.
    """
    z = np.asarray(z, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("z must have shape (N, D)")
    n, dim = z.shape
    if z_t.size == 0:
        z_t = z_t.reshape(n, 0, dim)
    if z_t.ndim != 3 or z_t.shape[0] != n or z_t.shape[2] != dim:
        raise ValueError(f"z_t must have shape ({n}, T, {dim}), got {z_t.shape}")
    y = check_labels(y, n)
    if not tau > 0:
        raise ValueError("tau must be positive")
    if n < 2:
        raise ValueError("need at least two samples")
    n_views = z_t.shape[1] + 1

    views = np.concatenate([z[:, None, :], z_t], axis=1)  # (N, V, D)
    mean = views.mean(axis=1)
    a, a_norm = _unit(mean, "anchor")

    classes, cls_idx, counts = np.unique(y, return_inverse=True, return_counts=True)
    cls_idx = cls_idx.reshape(-1)
    view_sum = views.sum(axis=1)  # (N, D)
    class_sum = np.zeros((classes.size, dim))
    np.add.at(class_sum, cls_idx, view_sum)
    n_pos = counts[cls_idx] * n_views  # |positives| per anchor
    s = class_sum[cls_idx]

    cand = views.reshape(n * n_views, dim) if include_transformed else z
    logits = a @ cand.T / tau
    top = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - top)
    denom = ex.sum(axis=1, keepdims=True)
    lse = (top + np.log(denom))[:, 0]
    p = ex / denom

    value = float(np.sum(lse - np.sum(a * s, axis=1) / (tau * n_pos)))

    g_a = p @ cand / tau - s / (tau * n_pos[:, None])
    g_cand = p.T @ a / tau
    # numerator: each view of a class-c sample receives -sum_{i in c} a_i / (tau |P_i|)
    class_pull = np.zeros((classes.size, dim))
    np.add.at(class_pull, cls_idx, a / (tau * n_pos[:, None]))
    g_views = np.repeat(-class_pull[cls_idx][:, None, :], n_views, axis=1)
    if include_transformed:
        g_views += g_cand.reshape(n, n_views, dim)
    else:
        g_views[:, 0] += g_cand
    g_mean = _unit_backward(g_a, a, a_norm)
    g_views += g_mean[:, None, :] / n_views
    return LossResult(value, {"z": g_views[:, 0], "z_t": g_views[:, 1:]})


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def cross_entropy(probs, y):
    """Mean negative log-probability of the true class.

    Probabilities are floored at 1e-12 inside the log. The gradient is with
    respect to ``probs``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = check_labels(y, probs.shape[0])
    if probs.ndim != 2:
        raise ValueError("probs must have shape (N, C)")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("each row of probs must be a distribution")
    n = probs.shape[0]
    rows = np.arange(n)
    p_true = probs[rows, y]
    clamped = np.maximum(p_true, PROB_FLOOR)
    value = float(-np.mean(np.log(clamped)))
    grad = np.zeros_like(probs)
    grad[rows, y] = np.where(p_true >= PROB_FLOOR, -1.0 / (n * clamped), 0.0)
    return LossResult(value, {"probs": grad})


def softmax_cross_entropy(logits, y):
    """Cross-entropy of ``softmax(logits)``; gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits, dtype=np.float64)
    y = check_labels(y, logits.shape[0])
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    log_p = shifted[rows, y] - log_norm
    value = float(-np.mean(np.maximum(log_p, np.log(PROB_FLOOR))))
    grad = softmax(logits)
    grad[rows, y] -= 1.0
    return LossResult(value, {"logits": grad / n})


def rep_loss(disc, la, beta=0.1):
    """``disc + beta * la``; gradients combine the same way."""
    for part in (disc, la):
        if not np.isfinite(part.value):
            raise ValueError("loss components must be finite")
    grads = {key: np.array(g, dtype=np.float64) for key, g in disc.gradients.items()}
    for key, g in la.gradients.items():
        if key in grads:
            grads[key] = grads[key] + beta * g
        else:
            grads[key] = beta * np.asarray(g, dtype=np.float64)
    return LossResult(disc.value + beta * la.value, grads)


def finite_diff_check(loss_fn, inputs, epsilon=1e-5, n_coords=200, seed=0):
    """Compare analytic gradients against central differences.

    Parameters
    ----------
    loss_fn : callable
        ``loss_fn(**inputs) -> LossResult`` whose ``gradients`` keys are a
        subset of ``inputs``.
    inputs : dict of str -> ndarray
    epsilon : float
    n_coords : int
        Number of coordinates sampled without replacement across all
        differentiable inputs (all of them when there are fewer).
    seed : int

    Returns
    -------
    float
        ``max |analytic - numeric| / max(1e-8, |numeric|)`` over the sample.
    """
    work = {key: np.array(val, dtype=np.float64) if isinstance(val, np.ndarray) else val
            for key, val in inputs.items()}
    base = loss_fn(**work)
    keys = sorted(base.gradients)
    coords = [(key, i) for key in keys for i in range(work[key].size)]
    if not coords:
        raise ValueError("loss exposes no gradients to check")
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        picks = np.sort(rng.choice(len(coords), size=n_coords, replace=False))
        coords = [coords[i] for i in picks]

    worst = 0.0
    for key, i in coords:
        flat = work[key].reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        up = loss_fn(**work).value
        flat[i] = orig - epsilon
        down = loss_fn(**work).value
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"non-finite loss when perturbing {key}[{i}]")
        numeric = (up - down) / (2.0 * epsilon)
        analytic = float(base.gradients[key].reshape(-1)[i])
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(numeric)))
    return worst
