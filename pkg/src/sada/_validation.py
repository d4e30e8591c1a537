"""Input validation helpers shared by the estimators and functional API."""

import numpy as np

from .imaging import RgbImage


def check_rgb(X):
    """Coerce an ``RgbImage`` or ``(h, w, 3)`` integer array to ``RgbImage``."""
    if isinstance(X, RgbImage):
        return X
    arr = np.asarray(X)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError("float image input must hold integral intensities")
        arr = arr.astype(np.int64)
    return RgbImage(arr)


def check_image_batch(X):
    """Return a ``(N, h, w, 3)`` uint8 array from a list of images or a stacked array."""
    imgs = [check_rgb(x) for x in X]
    if not imgs:
        raise ValueError("empty image batch")
    shape = imgs[0].pixels.shape
    for i, img in enumerate(imgs):
        if img.pixels.shape != shape:
            raise ValueError(f"image {i} has shape {img.pixels.shape}, expected {shape}")
    return np.stack([img.pixels for img in imgs])


def check_od(od):
    V = np.asarray(od, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != 3:
        raise ValueError(f"optical density must have shape (3, n), got {V.shape}")
    if not np.all(np.isfinite(V)):
        raise ValueError("optical density contains non-finite values")
    if np.any(V < 0):
        raise ValueError("optical density must be non-negative")
    return V


def check_labels(y, n=None):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if n is not None and y.shape[0] != n:
        raise ValueError(f"expected {n} labels, got {y.shape[0]}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    return y


def check_finite(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
