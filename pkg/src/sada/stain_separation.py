"""Sparse non-negative factorization of optical density into stains.

An OD matrix ``V`` (3 x n) is factored as ``V ~ W H`` with a non-negative,
unit-column stain basis ``W`` (3 x r) and non-negative density maps ``H``
(r x n). The basis is fit by alternating multiplicative updates on

    0.5 * ||V - W H||_F^2 + lam * sum(H)

using only stained (non-background) pixels; densities for every pixel are
then solved with ``W`` held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_od, check_rgb
from .imaging import DEFAULT_X0, from_optical_density, to_optical_density

__all__ = [
    "SnmfConfig",
    "StainDecomposition",
    "fit_snmf",
    "solve_density",
    "reconstruct",
    "snmf_objective",
    "matrix_to_csv",
    "matrix_from_csv",
    "StainSeparator",
]

EPS = 1e-12
MAX_STAINS = 3
_BACKTRACK_STEPS = 8


@dataclass(frozen=True)
class SnmfConfig:
    n_stains: int = 2
    lam: float = 0.1
    max_iters: int = 200
    tol: float = 1e-6
    seed: int = 0
    od_mask_threshold: float = 0.15

    def __post_init__(self):
        if not 1 <= self.n_stains <= MAX_STAINS:
            raise ValueError(f"r must be ≤ {MAX_STAINS} (and ≥ 1), got {self.n_stains}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class StainDecomposition:
    """Stain basis ``W`` (3 x r), densities ``H`` (r x n) and solver traces.

    ``objective_trace`` follows the sparse objective during basis fitting on
    the masked pixels; ``density_trace`` follows the least-squares objective
    while densities of all pixels are solved against the final basis.
    """

    basis: np.ndarray
    density: np.ndarray
    objective_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    density_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_stains(self):
        return self.basis.shape[1]


def snmf_objective(od, dec, lam):
    """``0.5 * ||V - W H||_F^2 + lam * sum(H)``."""
    od = np.asarray(od, dtype=np.float64)
    return _objective(od, dec.basis, dec.density, lam)


def _objective(V, W, H, lam):
    R = V - W @ H
    return 0.5 * float(np.sum(R * R)) + lam * float(np.sum(H))


def reconstruct(dec):
    W, H = dec.basis, dec.density
    if W.ndim != 2 or H.ndim != 2 or W.shape[1] != H.shape[0]:
        raise ValueError(f"shape mismatch: basis {W.shape} vs density {H.shape}")
    return np.maximum(W @ H, 0.0)


def _rel_change(prev, cur):
    if prev == cur:
        return 0.0
    return abs(prev - cur) / max(abs(prev), EPS)


def _update_h(V, W, H, lam):
    return H * (W.T @ V) / (W.T @ W @ H + lam + EPS)


def _gram_objective(vv, W, VHt, HHt, h_sum, lam):
    # 0.5*||V - WH||^2 expanded so only 3 x r and r x r products are needed
    fit = 0.5 * vv - float(np.sum(W * VHt)) + 0.5 * float(np.sum((W.T @ W) * HHt))
    return max(fit, 0.0) + lam * h_sum


def _update_w(V, W, H, lam, vv):
    """Multiplicative W step that accounts for the unit-norm columns.

    The plain step ``W * VH' / (WHH')`` followed by renormalization pushes
    column scale into H, which the sparsity term penalizes, so it is not
    monotone once ``lam > 0``. This step differentiates through the
    normalization instead and leaves H untouched; it is halved toward the
    current W whenever it would still raise the objective.

    Returns ``(W, objective)``.
    """
    VHt = V @ H.T
    HHt = H @ H.T
    h_sum = float(H.sum())
    current = _gram_objective(vv, W, VHt, HHt, h_sum, lam)
    WHHt = W @ HHt
    num = VHt + W * np.sum(WHHt * W, axis=0)
    den = WHHt + W * np.sum(VHt * W, axis=0) + EPS
    W_mu = W * num / den
    step = 1.0
    for _ in range(_BACKTRACK_STEPS):
        cand = W + step * (W_mu - W)
        norms = np.linalg.norm(cand, axis=0)
        if np.all(norms > EPS):
            cand = cand / norms
            obj = _gram_objective(vv, cand, VHt, HHt, h_sum, lam)
            if obj <= current:
                return cand, obj
        step *= 0.5
    return W, current


def solve_density(od, basis, max_iters=200, tol=1e-6):
    """Non-negative least-squares densities for a fixed basis.

    Starts from the clipped unconstrained solution and refines it with the
    multiplicative H update (no sparsity term).

    Returns
    -------
    density : ndarray of shape (r, n)
    trace : ndarray
        Objective after initialization and after each iteration.
    """
    V = np.asarray(od, dtype=np.float64)
    W = np.asarray(basis, dtype=np.float64)
    ls = np.linalg.lstsq(W, V, rcond=None)[0]
    # strictly positive start; multiplicative steps cannot leave zero
    H = np.maximum(ls, 1e-6)
    trace = [_objective(V, W, H, 0.0)]
    for _ in range(max_iters):
        H = _update_h(V, W, H, 0.0)
        trace.append(_objective(V, W, H, 0.0))
        if _rel_change(trace[-2], trace[-1]) < tol:
            break
    return H, np.asarray(trace)


def fit_snmf(od, cfg=None):
    """Factor an OD matrix into a stain basis and density maps.

    Parameters
    ----------
    od : array-like of shape (3, n)
    cfg : SnmfConfig, optional

    Returns
    -------
    StainDecomposition
        Basis columns are ordered by descending total density.
    """
    cfg = SnmfConfig() if cfg is None else cfg
    V_all = check_od(od)
    r = cfg.n_stains
    n = V_all.shape[1]
    if n < r:
        raise ValueError(f"need at least r={r} pixels, got {n}")

    mask = V_all.mean(axis=0) >= cfg.od_mask_threshold
    V = V_all[:, mask] if mask.sum() >= r else V_all

    rng = np.random.default_rng(cfg.seed)
    W = rng.uniform(0.1, 1.0, size=(3, r))
    H = rng.uniform(0.1, 1.0, size=(r, V.shape[1]))
    W = W / np.linalg.norm(W, axis=0)

    vv = float(np.sum(V * V))
    trace = [_objective(V, W, H, cfg.lam)]
    for _ in range(cfg.max_iters):
        H = _update_h(V, W, H, cfg.lam)
        W, obj = _update_w(V, W, H, cfg.lam, vv)
        trace.append(obj)
        if _rel_change(trace[-2], trace[-1]) < cfg.tol:
            break

    density, density_trace = solve_density(V_all, W, cfg.max_iters, cfg.tol)
    order = np.argsort(-density.sum(axis=1), kind="stable")
    return StainDecomposition(
        basis=W[:, order],
        density=density[order],
        objective_trace=np.asarray(trace),
        density_trace=density_trace,
    )


def matrix_to_csv(M):
    """CSV text: first line ``rows,cols``, then row-major values to 9 significant digits."""
    M = np.asarray(M, dtype=np.float64)
    lines = [f"{M.shape[0]},{M.shape[1]}"]
    lines.extend(",".join(f"{v:.9g}" for v in row) for row in M)
    return "\n".join(lines) + "\n"


def matrix_from_csv(text):
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty matrix CSV")
    try:
        rows, cols = (int(v) for v in lines[0].split(","))
    except ValueError as exc:
        raise ValueError(f"bad matrix CSV header {lines[0]!r}") from exc
    body = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    M = np.asarray(body, dtype=np.float64).reshape(-1, cols) if body else np.zeros((0, cols))
    if M.shape != (rows, cols):
        raise ValueError(f"matrix CSV declares {rows}x{cols} but holds {M.shape}")
    return M


class StainSeparator(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_snmf` for a single RGB image.

    ``fit`` learns the stain basis of one image; ``transform`` returns the
    density maps of any image against that basis, and ``inverse_transform``
    renders density maps back to RGB.

    Parameters
    ----------
    n_stains : int, default=2
    lam : float, default=0.1
        Weight of the L1 penalty on densities during basis fitting.
    max_iter : int, default=200
    tol : float, default=1e-6
    od_threshold : float, default=0.15
        Pixels with mean OD below this are ignored while fitting the basis.
    random_state : int, default=0
    x0 : float, default=255
    """

    def __init__(self, n_stains=2, lam=0.1, max_iter=200, tol=1e-6, od_threshold=0.15,
                 random_state=0, x0=DEFAULT_X0):
        self.n_stains = n_stains
        self.lam = lam
        self.max_iter = max_iter
        self.tol = tol
        self.od_threshold = od_threshold
        self.random_state = random_state
        self.x0 = x0

    def _config(self):
        return SnmfConfig(n_stains=self.n_stains, lam=self.lam, max_iters=self.max_iter,
                          tol=self.tol, seed=self.random_state,
                          od_mask_threshold=self.od_threshold)

    def fit(self, X, y=None):
        img = check_rgb(X)
        dec = fit_snmf(to_optical_density(img, self.x0), self._config())
        self.stain_basis_ = dec.basis
        self.density_ = dec.density
        self.objective_trace_ = dec.objective_trace
        self.image_shape_ = img.pixels.shape
        return self

    def transform(self, X):
        check_is_fitted(self, "stain_basis_")
        img = check_rgb(X)
        H, _ = solve_density(to_optical_density(img, self.x0), self.stain_basis_,
                             self.max_iter, self.tol)
        return H

    def inverse_transform(self, H, shape=None):
        check_is_fitted(self, "stain_basis_")
        height, width = (shape or self.image_shape_)[:2]
        return from_optical_density(self.stain_basis_ @ np.asarray(H), width, height, self.x0)
