"""Procedural multi-domain "blood cell" images.

Class controls cell morphology (size, nucleus shape, lobes, granule texture);
domain controls the stain: a per-channel tint multiplied into optical
density, a staining strength and pixel noise. Every image is rendered from
its own seed derived from ``(seed, domain, class, index)``, so a dataset is
byte-identical for a given seed regardless of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augmentation import derive_seed

__all__ = [
    "BlobParams",
    "SynthDomainSpec",
    "DomainData",
    "DEFAULT_CLASS_SHAPES",
    "default_domains",
    "render_cell",
    "synth_dataset",
    "class_counts",
]

# OD signatures of a pink cytoplasm stain and a purple nuclear stain
CYTO_STAIN = np.array([0.07, 0.99, 0.11])
NUCLEUS_STAIN = np.array([0.65, 0.70, 0.29])
CYTO_STAIN = CYTO_STAIN / np.linalg.norm(CYTO_STAIN)
NUCLEUS_STAIN = NUCLEUS_STAIN / np.linalg.norm(NUCLEUS_STAIN)


@dataclass(frozen=True)
class BlobParams:
    """Morphology of one cell class, in units of the image half-width."""

    cell_radius: float
    nucleus_radius: float
    eccentricity: float = 0.0
    lobes: int = 1
    texture_freq: float = 0.0


# neutrophil, eosinophil, basophil, monocyte, lymphocyte look-alikes
DEFAULT_CLASS_SHAPES = {
    0: BlobParams(0.78, 0.20, 0.0, 3, 0.0),
    1: BlobParams(0.80, 0.26, 0.0, 2, 2.2),
    2: BlobParams(0.70, 0.42, 0.3, 1, 3.0),
    3: BlobParams(0.90, 0.50, 0.55, 1, 0.0),
    4: BlobParams(0.55, 0.45, 0.0, 1, 0.0),
}


@dataclass(frozen=True)
class SynthDomainSpec:
    domain_id: int
    tint: tuple = (1.0, 1.0, 1.0)
    noise: float = 2.0
    strength: float = 1.0
    tint_jitter: float = 0.06
    class_shapes: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_SHAPES))

    def __post_init__(self):
        if len(self.tint) != 3 or min(self.tint) <= 0:
            raise ValueError("tint must be three positive multipliers")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.strength <= 0:
            raise ValueError("strength must be positive")


@dataclass
class DomainData:
    spec: SynthDomainSpec
    images: np.ndarray  # (M, S, S, 3) uint8
    labels: np.ndarray  # (M,)


def default_domains():
    """Three tint-shifted domains: neutral, warm and cool stains."""
    return [
        SynthDomainSpec(0, tint=(1.0, 1.0, 1.0), strength=1.0),
        SynthDomainSpec(1, tint=(1.6, 0.65, 0.9), strength=1.2),
        SynthDomainSpec(2, tint=(0.6, 1.3, 1.7), strength=0.85),
    ]


def _nucleus_mask(xx, yy, shape, rng):
    r = shape.nucleus_radius * rng.uniform(0.9, 1.1)
    theta = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    if shape.lobes > 1:
        density = np.zeros_like(xx)
        spread = 1.5 * r
        for j in range(shape.lobes):
            phi = 2 * np.pi * j / shape.lobes
            cx, cy = spread * np.cos(phi), spread * np.sin(phi)
            d2 = (u - cx) ** 2 + (v - cy) ** 2
            density = np.maximum(density, (d2 <= r * r).astype(float))
        return density
    a = r / np.sqrt(1 - shape.eccentricity**2) if shape.eccentricity else r
    b = r
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if shape.eccentricity >= 0.5:
        # kidney notch
        notch = (u / a - 0.0) ** 2 + ((v - b) / (0.6 * b)) ** 2 <= 1.0
        inside &= ~notch
    return inside.astype(float)


def render_cell(shape, domain, size, rng):
    """Render one cell image as ``(size, size, 3)`` uint8."""
    grid = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    xx = xx - rng.uniform(-0.12, 0.12)
    yy = yy - rng.uniform(-0.12, 0.12)

    rc = shape.cell_radius * rng.uniform(0.92, 1.08)
    cell = ((xx**2 + yy**2) <= rc * rc).astype(float)
    cyto = 0.55 * cell
    if shape.texture_freq > 0:
        phase = rng.uniform(0, 2 * np.pi, size=2)
        f = shape.texture_freq * np.pi * 2
        gran = 0.5 + 0.5 * np.sin(f * xx + phase[0]) * np.sin(f * yy + phase[1])
        cyto = cyto * (0.6 + 0.9 * gran)
    nuc = 1.1 * _nucleus_mask(xx, yy, shape, rng) * cell
    cyto = cyto * (1 - nuc / 1.1)

    tint = np.asarray(domain.tint) * np.exp(rng.normal(0, domain.tint_jitter, size=3))
    strength = domain.strength * rng.uniform(0.9, 1.1)
    W = np.stack([CYTO_STAIN, NUCLEUS_STAIN], axis=1) * tint[:, None]
    H = strength * np.stack([cyto.ravel(), nuc.ravel()])
    od = W @ H + 0.02
    x = 255.0 * np.exp(-od)
    if domain.noise > 0:
        x = x + rng.normal(0, domain.noise, size=x.shape)
    x = np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)
    return x.T.reshape(size, size, 3)


def class_counts(n_per_class, ratios):
    return [max(1, int(round(n_per_class * r))) for r in ratios]


def synth_dataset(domains, n_per_class, class_imbalance_ratios, seed=0, image_size=32):
    """Generate labelled images for each domain.

    Parameters
    ----------
    domains : sequence of SynthDomainSpec
    n_per_class : int
        Base count; class ``c`` gets ``round(n_per_class * ratios[c])`` images.
    class_imbalance_ratios : sequence of float
        One positive ratio per class; its length sets the number of classes.
    seed : int
    image_size : int

    Returns
    -------
    list of DomainData, in the order of ``domains``.
    """
    ratios = list(class_imbalance_ratios)
    if len(ratios) < 2:
        raise ValueError("need at least two classes")
    if len(domains) < 3:
        raise ValueError("need at least three domains")
    if min(ratios) <= 0:
        raise ValueError("class ratios must be positive")
    if image_size < 8:
        raise ValueError("image_size must be at least 8 pixels")
    counts = class_counts(n_per_class, ratios)
    out = []
    for dom in domains:
        missing = [c for c in range(len(ratios)) if c not in dom.class_shapes]
        if missing:
            raise ValueError(f"domain {dom.domain_id} has no shape for classes {missing}")
        imgs, labels = [], []
        for c, count in enumerate(counts):
            for i in range(count):
                rng = np.random.default_rng(derive_seed(seed, dom.domain_id, c, i))
                imgs.append(render_cell(dom.class_shapes[c], dom, image_size, rng))
                labels.append(c)
        out.append(DomainData(dom, np.stack(imgs), np.asarray(labels, dtype=np.int64)))
    return out
