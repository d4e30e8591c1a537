"""Stain-based augmentation: re-render a sample with other clusters' stains.

Each raw sample ``i`` in a batch is decomposed into ``(W_i, H_i)``. Bases are
clustered into ``k`` pseudo-domains, and for each cluster other than the
sample's own, a donor ``t`` is drawn from that cluster. The transformed image
is ``x0 * exp(-W_t @ Norm(H_i, H_t))`` where ``Norm`` rescales each density
row so its 99th percentile matches the donor's.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_rgb
from .imaging import DEFAULT_X0, RgbImage, from_optical_density, to_optical_density
from .stain_clustering import kmeans_fit
from .stain_separation import SnmfConfig, fit_snmf

__all__ = [
    "AugmentedSample",
    "row_percentile99",
    "normalize_density",
    "restain",
    "decompose_batch",
    "augment_from_decompositions",
    "generate_batch_transforms",
    "derive_seed",
    "StainAugmenter",
]

PERCENTILE_GUARD = 1e-8


@dataclass(frozen=True)
class AugmentedSample:
    source_index: int
    target_index: int
    image: RgbImage
    donor_cluster: int
    source_cluster: int


def derive_seed(seed, *indices):
    """Independent 63-bit seed for a given (seed, index...) tuple."""
    ss = np.random.SeedSequence([int(seed), *(int(i) for i in indices)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _percentile_rows(H):
    """Nearest-rank 99th percentile of each row of ``H``."""
    m = H.shape[1]
    rank = -(-99 * m // 100)  # exact integer ceil(0.99 m), 1-based
    return np.sort(H, axis=1)[:, rank - 1]


def row_percentile99(h_row):
    """Nearest-rank 99th percentile: sorted element at 1-based index ``ceil(0.99 m)``."""
    row = np.asarray(h_row, dtype=np.float64).reshape(-1)
    if row.size == 0:
        raise ValueError("cannot take the percentile of an empty row")
    return float(_percentile_rows(row[None, :])[0])


def normalize_density(h_src, h_tgt):
    """Scale each row of ``h_src`` so its 99th percentile equals that of ``h_tgt``.

    Rows whose source percentile is below 1e-8 are returned unscaled.
    """
    h_src = np.asarray(h_src, dtype=np.float64)
    h_tgt = np.asarray(h_tgt, dtype=np.float64)
    if h_src.ndim != 2 or h_tgt.ndim != 2 or h_src.shape[0] != h_tgt.shape[0]:
        raise ValueError(f"stain count mismatch: {h_src.shape} vs {h_tgt.shape}")
    if h_src.shape[1] == 0 or h_tgt.shape[1] == 0:
        raise ValueError("density maps must have at least one pixel")
    scale = _ratio(_percentile_rows(h_src), _percentile_rows(h_tgt))
    return h_src * scale[:, None]


def _ratio(p_src, p_tgt):
    scale = np.ones_like(p_src)
    ok = p_src >= PERCENTILE_GUARD
    scale[ok] = p_tgt[ok] / p_src[ok]
    return scale


def restain(h_src, h_tgt, w_tgt, width, height, x0=DEFAULT_X0):
    """Render source densities with a donor basis and donor density scale."""
    w_tgt = np.asarray(w_tgt, dtype=np.float64)
    h_src = np.asarray(h_src, dtype=np.float64)
    if w_tgt.ndim != 2 or w_tgt.shape[0] != 3 or w_tgt.shape[1] != h_src.shape[0]:
        raise ValueError(f"basis {w_tgt.shape} does not match densities {h_src.shape}")
    if h_src.shape[1] != width * height:
        raise ValueError("density maps do not cover width * height pixels")
    od = w_tgt @ normalize_density(h_src, h_tgt)
    return from_optical_density(np.maximum(od, 0.0), width, height, x0)


def _n_threads():
    try:
        return max(1, int(os.environ.get("SADA_THREADS", "1")))
    except ValueError:
        return 1


def decompose_batch(images, snmf_cfg=None, seed=0, x0=DEFAULT_X0):
    """Decompose each image with an SNMF seed derived from ``(seed, index)``.

    Work is spread over ``SADA_THREADS`` threads; results keep input order.
    """
    base = SnmfConfig() if snmf_cfg is None else snmf_cfg
    imgs = [check_rgb(im) for im in images]

    def work(i):
        cfg = SnmfConfig(n_stains=base.n_stains, lam=base.lam, max_iters=base.max_iters,
                         tol=base.tol, seed=derive_seed(seed, 0, i),
                         od_mask_threshold=base.od_mask_threshold)
        return fit_snmf(to_optical_density(imgs[i], x0), cfg)

    threads = min(_n_threads(), len(imgs))
    if threads <= 1:
        return [work(i) for i in range(len(imgs))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, range(len(imgs))))


def augment_from_decompositions(decs, width, height, k, rng, cluster_seed, x0=DEFAULT_X0):
    """Cluster the bases and build ``k - 1`` transformed samples per source.

    Parameters
    ----------
    decs : sequence of StainDecomposition
    width, height : int
        Image size shared by every sample.
    k : int
        Number of stain clusters (k >= 2).
    rng : numpy.random.Generator
        Draws the donors.
    cluster_seed : int
        Seed for k-means++.

    Returns
    -------
    model : ClusterModel
    samples : list of list of AugmentedSample
        ``samples[i]`` has one entry per foreign cluster, in increasing
        cluster order.
    """
    if k < 2:
        raise ValueError("k must be at least 2 to have foreign clusters")
    if len(decs) < k:
        raise ValueError(f"batch of {len(decs)} is smaller than k={k}")
    model = kmeans_fit([d.basis for d in decs], k, cluster_seed)
    members = {c: np.flatnonzero(model.labels == c) for c in range(1, k + 1)}
    pct = [_percentile_rows(d.density) for d in decs]
    plan = []
    for i in range(len(decs)):
        own = int(model.labels[i])
        for c in range(1, k + 1):
            if c != own:
                plan.append((i, int(rng.choice(members[c])), c, own))
    ods = np.stack([decs[t].basis @ (decs[i].density * _ratio(pct[i], pct[t])[:, None])
                    for i, t, _, _ in plan])
    pixels = _od_to_pixels(ods, width, height, x0)
    out = [[] for _ in decs]
    for (i, t, c, own), px in zip(plan, pixels):
        out[i].append(AugmentedSample(i, t, RgbImage(px), c, own))
    return model, out


def _od_to_pixels(ods, width, height, x0):
    # batched from_optical_density: (B, 3, n) -> (B, height, width, 3) uint8
    x = np.floor(x0 * np.exp(-np.maximum(ods, 0.0)) + 0.5)
    x = np.clip(x, 0, 255).astype(np.uint8)
    return x.transpose(0, 2, 1).reshape(len(ods), height, width, 3)


def generate_batch_transforms(images, k=3, snmf_cfg=None, seed=0, x0=DEFAULT_X0):
    """Full pipeline: decompose, cluster stains, draw donors, re-stain.

    Returns ``(model, samples)`` as :func:`augment_from_decompositions`.
    """
    imgs = [check_rgb(im) for im in images]
    if len(imgs) < k:
        raise ValueError(f"batch of {len(imgs)} is smaller than k={k}")
    shape = imgs[0].pixels.shape
    if any(im.pixels.shape != shape for im in imgs):
        raise ValueError("all images in a batch must share dimensions")
    decs = decompose_batch(imgs, snmf_cfg, seed, x0)
    rng = np.random.default_rng(derive_seed(seed, 2))
    return augment_from_decompositions(decs, shape[1], shape[0], k, rng,
                                       derive_seed(seed, 1), x0)


class StainAugmenter(BaseEstimator):
    """Batch stain augmentation with the estimator parameter interface.

    ``fit_transform(images)`` returns the augmented samples and stores the
    cluster labels in ``labels_``.
    """

    def __init__(self, k=3, n_stains=2, lam=0.1, max_iter=200, tol=1e-6,
                 od_threshold=0.15, random_state=0):
        self.k = k
        self.n_stains = n_stains
        self.lam = lam
        self.max_iter = max_iter
        self.tol = tol
        self.od_threshold = od_threshold
        self.random_state = random_state

    def fit_transform(self, X, y=None):
        cfg = SnmfConfig(n_stains=self.n_stains, lam=self.lam, max_iters=self.max_iter,
                         tol=self.tol, od_mask_threshold=self.od_threshold)
        model, samples = generate_batch_transforms(X, self.k, cfg, self.random_state)
        self.cluster_model_ = model
        self.labels_ = model.labels
        return samples
