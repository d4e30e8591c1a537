import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def planted_image(rng, width=24, height=24, bases=None, noise=0.0):
    """Beer-Lambert image from a planted two-stain factorization.

    Returns ``(pixels, W, H)`` with ``pixels`` of shape (height, width, 3).
    """
    if bases is None:
        W = np.array([[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]])
    else:
        W = np.asarray(bases, dtype=np.float64)
    W = W / np.linalg.norm(W, axis=0)
    yy, xx = np.mgrid[0:height, 0:width] / max(width, height)
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.05)
    ring = np.clip(1.0 - np.abs(np.hypot(xx - 0.5, yy - 0.5) - 0.3) * 6, 0, 1)
    H = np.stack([1.2 * blob.ravel(), 0.8 * ring.ravel()]) * rng.uniform(0.8, 1.2)
    x = 255.0 * np.exp(-(W @ H))
    if noise:
        x = x + rng.normal(0, noise, size=x.shape)
    px = np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)
    return px.T.reshape(height, width, 3), W, H
