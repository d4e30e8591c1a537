"""K-means over stain bases, yielding per-sample pseudo-domain labels.

Labels are 1-based (``1..k``) and canonical: the cluster holding the first
sample is 1, the next newly seen cluster is 2, and so on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._io import FORMAT_VERSION

__all__ = [
    "ClusterModel",
    "flatten_bases",
    "kmeans_fit",
    "assign",
    "labels_to_json",
    "labels_from_json",
    "StainKMeans",
]

MAX_ITER = 100
DEFAULT_N_INIT = 10


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray  # (k, 3r); row j-1 belongs to label j
    labels: np.ndarray  # (N,), values in 1..k
    inertia: float
    inertia_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_iter: int = 0


def flatten_bases(bases):
    """Stack 3 x r bases as column-major ``3r`` vectors."""
    mats = [np.asarray(b, dtype=np.float64) for b in bases]
    if not mats:
        raise ValueError("no stain bases given")
    r = mats[0].shape[1] if mats[0].ndim == 2 else None
    for i, m in enumerate(mats):
        if m.ndim != 2 or m.shape[0] != 3:
            raise ValueError(f"basis {i} must have shape (3, r), got {m.shape}")
        if m.shape[1] != r:
            raise ValueError(f"basis {i} has r={m.shape[1]}, expected r={r}")
    return np.stack([m.reshape(-1, order="F") for m in mats])


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _plusplus(X, k, rng):
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers.append(idx)
        d2 = np.minimum(d2, _sq_dists(X, X[idx : idx + 1])[:, 0])
    return X[centers].copy()


def _repair_empty(X, C, labels):
    # move the point farthest from its own centroid into each empty cluster
    k = C.shape[0]
    for j in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[j] > 0:
            continue
        own = ((X - C[labels]) ** 2).sum(axis=1)
        own[counts[labels] <= 1] = -1.0  # never empty another cluster
        i = int(np.argmax(own))
        labels[i] = j
        C[j] = X[i]
    return labels


def _means(X, labels, k):
    onehot = np.zeros((k, X.shape[0]))
    onehot[labels, np.arange(X.shape[0])] = 1.0
    return (onehot @ X) / onehot.sum(axis=1, keepdims=True)


def _inertia(X, C, labels):
    return float(((X - C[labels]) ** 2).sum())


def _canonical(labels, C):
    order = []
    for lab in labels:
        if lab not in order:
            order.append(int(lab))
    remap = np.empty(C.shape[0], dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[labels] + 1, C[order]


def kmeans_fit(bases, k, seed=0, n_init=DEFAULT_N_INIT):
    """Cluster stain bases with seeded k-means++ and Lloyd iterations.

    Parameters
    ----------
    bases : sequence of (3, r) arrays
    k : int
    seed : int
    n_init : int, default=10
        Independent k-means++ restarts; the run with the lowest final
        inertia is kept (the earliest one on ties).

    Returns
    -------
    ClusterModel
        ``inertia_trace`` and ``n_iter`` describe the kept run.
    """
    X = flatten_bases(bases)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    if n_init < 1:
        raise ValueError("n_init must be at least 1")
    ss = np.random.SeedSequence(int(seed))
    best = None
    seen = set()
    for child in ss.spawn(n_init):
        labels, C, n_iter, trace = _lloyd(X, k, np.random.default_rng(child))
        key = tuple(_canonical(labels, C)[0])
        if key in seen:
            # same Lloyd fixed point as an earlier restart, same refinement
            continue
        seen.add(key)
        labels, C = _hartigan(X, C, labels, trace)
        if best is None or trace[-1] < best[3][-1]:
            best = (labels, C, n_iter, trace)
    labels, C, n_iter, trace = best
    canon, C = _canonical(labels, C)
    return ClusterModel(k=k, centroids=C, labels=canon, inertia=trace[-1],
                        inertia_trace=np.asarray(trace), n_iter=n_iter)


def _lloyd(X, k, rng):
    C = _plusplus(X, k, rng)
    labels = np.argmin(_sq_dists(X, C), axis=1)
    labels = _repair_empty(X, C, labels)
    trace = [_inertia(X, C, labels)]
    n_iter = 0
    for n_iter in range(1, MAX_ITER + 1):
        C = _means(X, labels, k)
        trace.append(_inertia(X, C, labels))
        new = np.argmin(_sq_dists(X, C), axis=1)
        new = _repair_empty(X, C, new)
        if np.array_equal(new, labels):
            break
        labels = new
        trace.append(_inertia(X, C, labels))
    return labels, C, n_iter, trace


def _hartigan(X, C, labels, trace):
    """Single-point moves that strictly lower inertia.

    A Lloyd fixed point can still improve by moving one point, because the
    move also shifts both centroids; this escapes many such local optima.
    Each step applies the best available move and appends the new inertia
    to ``trace``.
    """
    k = C.shape[0]
    rows = np.arange(X.shape[0])
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    for _ in range(MAX_ITER * X.shape[0]):
        d2 = _sq_dists(X, C)
        own = counts[labels]
        gain_out = (own > 1) * own / np.maximum(own - 1, 1) * d2[rows, labels]
        cost_in = counts / (counts + 1) * d2
        cost_in[rows, labels] = np.inf
        dest = np.argmin(cost_in, axis=1)
        delta = cost_in[rows, dest] - gain_out
        i = int(np.argmin(delta))
        if not delta[i] < -1e-12 * max(gain_out[i], 1e-300):
            break
        a, b = labels[i], dest[i]
        C[a] = (C[a] * counts[a] - X[i]) / (counts[a] - 1)
        C[b] = (C[b] * counts[b] + X[i]) / (counts[b] + 1)
        counts[a] -= 1
        counts[b] += 1
        labels[i] = b
        trace.append(trace[-1] + float(delta[i]))
    return labels, C


def assign(model, basis):
    """Label of the nearest centroid; ties go to the smaller label."""
    if model is None or model.centroids is None:
        raise ValueError("cluster model is not fitted")
    x = flatten_bases([basis])
    if x.shape[1] != model.centroids.shape[1]:
        raise ValueError("basis r does not match the fitted model")
    return int(np.argmin(_sq_dists(x, model.centroids)[0])) + 1


def labels_to_json(model):
    return {"version": FORMAT_VERSION, "k": int(model.k), "labels": [int(v) for v in model.labels]}


def labels_from_json(text):
    obj = json.loads(text) if isinstance(text, str) else text
    return int(obj["k"]), np.asarray(obj["labels"], dtype=np.int64)


class StainKMeans(ClusterMixin, BaseEstimator):
    """K-means over stain bases as an estimator.

    ``fit`` takes a sequence of (3, r) stain bases (or an (N, 3, r) array).
    ``labels_`` are 1-based, unlike scikit-learn's clusterers.
    """

    def __init__(self, n_clusters=3, random_state=0, n_init=DEFAULT_N_INIT):
        self.n_clusters = n_clusters
        self.random_state = random_state
        self.n_init = n_init

    def fit(self, X, y=None):
        model = kmeans_fit(list(X), self.n_clusters, self.random_state, self.n_init)
        self.model_ = model
        self.cluster_centers_ = model.centroids
        self.labels_ = model.labels
        self.inertia_ = model.inertia
        self.n_iter_ = model.n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return np.array([assign(self.model_, b) for b in X], dtype=np.int64)
