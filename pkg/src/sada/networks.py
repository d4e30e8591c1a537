"""Small numpy networks with explicit forward/backward passes.

Parameters live in plain ``dict[str, ndarray]`` so optimizers, hashing and
serialization stay trivial. Each ``*_forward`` returns its output plus a
cache consumed by the matching ``*_backward``.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "images_to_od",
    "extract_patches",
    "init_encoder",
    "encoder_forward",
    "encoder_backward",
    "init_local_projector",
    "local_projector_forward",
    "local_projector_backward",
    "init_classifier",
    "classifier_forward",
    "classifier_backward",
    "params_digest",
    "sgd_step",
]


_OD_LUT = -np.log(np.maximum(np.arange(256, dtype=np.float64), 1.0) / 255.0)


def images_to_od(images):
    """``(N, S, S, 3)`` uint8 batch to optical density, same layout."""
    x = np.asarray(images)
    if x.dtype == np.uint8:
        return _OD_LUT[x]
    return -np.log(np.maximum(x.astype(np.float64), 1.0) / 255.0)


def extract_patches(X, grid):
    """Split ``(N, S, S, C)`` into a ``grid x grid`` array of flattened patches.

    Returns ``(N, grid * grid, patch * patch * C)``; positions are row-major.
    """
    n, s, s2, ch = X.shape
    if s != s2 or s % grid:
        raise ValueError(f"image size {s} is not divisible into a {grid}x{grid} grid")
    ps = s // grid
    p = X.reshape(n, grid, ps, grid, ps, ch).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(n, grid * grid, ps * ps * ch)


def _he(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def init_encoder(rng, patch_dim, feature_dim, embed_dim):
    """Patch-linear backbone (shared affine map + ReLU) and linear projector."""
    return {
        "A": _he(rng, patch_dim, feature_dim),
        "b": np.zeros(feature_dim),
        "P": rng.normal(0.0, np.sqrt(1.0 / feature_dim), size=(feature_dim, embed_dim)),
        "c": np.zeros(embed_dim),
    }


def encoder_forward(params, patches):
    """Feature map ``F`` (N, P, Db), pooled ``h`` (N, Db), projection ``u`` (N, Dz)."""
    pre = patches @ params["A"] + params["b"]
    F = np.maximum(pre, 0.0)
    h = F.mean(axis=1)
    u = h @ params["P"] + params["c"]
    return F, h, u, (patches, pre, h)


def encoder_backward(params, cache, gF=None, gh=None, gu=None):
    patches, pre, h = cache
    grads = {}
    total_h = np.zeros_like(h) if gh is None else np.array(gh, dtype=np.float64)
    if gu is not None:
        grads["P"] = h.T @ gu
        grads["c"] = gu.sum(axis=0)
        total_h += gu @ params["P"].T
    else:
        grads["P"] = np.zeros_like(params["P"])
        grads["c"] = np.zeros_like(params["c"])
    n_pos = pre.shape[1]
    total_F = np.broadcast_to(total_h[:, None, :] / n_pos, pre.shape).copy()
    if gF is not None:
        total_F += gF
    gpre = total_F * (pre > 0)
    flat = gpre.reshape(-1, gpre.shape[-1])
    grads["A"] = patches.reshape(-1, patches.shape[-1]).T @ flat
    grads["b"] = flat.sum(axis=0)
    return grads


def init_local_projector(rng, feature_dim, out_dim):
    """Affine, ReLU, affine: ``Db -> Db -> De``."""
    return {
        "L1": _he(rng, feature_dim, feature_dim),
        "l1": np.zeros(feature_dim),
        "L2": rng.normal(0.0, np.sqrt(1.0 / feature_dim), size=(feature_dim, out_dim)),
        "l2": np.zeros(out_dim),
    }


def local_projector_forward(params, F):
    pre = F @ params["L1"] + params["l1"]
    hid = np.maximum(pre, 0.0)
    E = hid @ params["L2"] + params["l2"]
    return E, (F, pre, hid)


def local_projector_backward(params, cache, gE):
    F, pre, hid = cache
    d_out = gE.shape[-1]
    gE2 = gE.reshape(-1, d_out)
    hid2 = hid.reshape(-1, hid.shape[-1])
    grads = {"L2": hid2.T @ gE2, "l2": gE2.sum(axis=0)}
    ghid = (gE2 @ params["L2"].T) * (pre.reshape(hid2.shape) > 0)
    grads["L1"] = F.reshape(-1, F.shape[-1]).T @ ghid
    grads["l1"] = ghid.sum(axis=0)
    gF = (ghid @ params["L1"].T).reshape(F.shape)
    return grads, gF


def init_classifier(rng, in_dim, n_classes, scale=0.01):
    return {"Wc": rng.normal(0.0, scale, size=(in_dim, n_classes)), "bc": np.zeros(n_classes)}


def classifier_forward(params, h):
    if "mu" in params:
        h = (h - params["mu"]) / params["sd"]
    return h @ params["Wc"] + params["bc"]


def classifier_backward(params, h, glogits):
    """Gradients for ``Wc``/``bc`` and the upstream features.

    Standardization statistics ``mu``/``sd``, when present, are constants.
    """
    gh = glogits @ params["Wc"].T
    if "mu" in params:
        h = (h - params["mu"]) / params["sd"]
        gh = gh / params["sd"]
    grads = {"Wc": h.T @ glogits, "bc": glogits.sum(axis=0)}
    return grads, gh


def sgd_step(params, grads, lr):
    """In-place plain gradient descent on every parameter with a gradient."""
    for key, g in grads.items():
        params[key] -= lr * g


def params_digest(params):
    """SHA-256 over parameter names, shapes and bytes; for stage-freeze checks."""
    h = hashlib.sha256()
    for key in sorted(params):
        arr = np.ascontiguousarray(params[key])
        h.update(key.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
