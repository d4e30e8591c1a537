"""RGB images, binary PPM I/O and the Beer-Lambert optical-density transforms.

Optical density (OD) is stored as a ``(3, n)`` float array whose columns are
pixels in row-major order, top row first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_bytes

__all__ = [
    "RgbImage",
    "PpmError",
    "to_optical_density",
    "from_optical_density",
    "load_ppm",
    "save_ppm",
    "encode_ppm",
    "decode_ppm",
    "DEFAULT_X0",
]

DEFAULT_X0 = 255.0


class PpmError(ValueError):
    """Raised when a byte stream is not a P6 pixmap this module can read."""

    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


@dataclass(frozen=True, eq=False)
class RgbImage:
    """8-bit RGB raster.

    ``pixels`` has shape ``(height, width, 3)`` and dtype ``uint8``.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (height, width, 3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must have positive width and height")
        if px.dtype != np.uint8:
            if not np.issubdtype(px.dtype, np.integer):
                raise ValueError(f"pixels must be integers, got {px.dtype}")
            if px.min() < 0 or px.max() > 255:
                raise ValueError("channel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def data(self):
        """Flat row-major channel data, length ``3 * width * height``."""
        return self.pixels.reshape(-1)

    @classmethod
    def from_flat(cls, width, height, data):
        arr = np.asarray(data)
        if arr.size != 3 * width * height:
            raise ValueError("data length must equal 3 * width * height")
        return cls(arr.reshape(height, width, 3))

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))


def to_optical_density(img, x0=DEFAULT_X0):
    """Map intensities to optical density ``-ln(max(X, 1) / x0)``.

    Parameters
    ----------
    img : RgbImage
    x0 : float
        Illuminating intensity.

    Returns
    -------
    ndarray of shape (3, width * height)
    """
    if x0 <= 0:
        raise ValueError("x0 must be positive")
    x = img.pixels.reshape(-1, 3).T.astype(np.float64)
    od = -np.log(np.maximum(x, 1.0) / x0)
    # x0 below a channel value would give negative OD
    return np.maximum(od, 0.0)


def from_optical_density(od, width, height, x0=DEFAULT_X0):
    """Inverse Beer-Lambert transform back to an 8-bit image.

    Values are rounded to nearest with ties away from zero, then clamped to
    ``[0, 255]``.
    """
    od = np.asarray(od, dtype=np.float64)
    if od.shape != (3, width * height):
        raise ValueError(f"expected OD of shape (3, {width * height}), got {od.shape}")
    if not np.all(np.isfinite(od)):
        raise ValueError("optical density must be finite")
    x = x0 * np.exp(-od)
    x = np.floor(x + 0.5)
    x = np.clip(x, 0, 255).astype(np.uint8)
    return RgbImage(x.T.reshape(height, width, 3))


def encode_ppm(img):
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def _header_tokens(buf):
    # three whitespace-separated integers after the magic, comments allowed
    tokens = []
    pos = 2
    n = len(buf)
    while len(tokens) < 3:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise PpmError("malformed", "malformed header: unexpected end of file")
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tok = buf[start:pos]
        if not tok.isdigit():
            raise PpmError("malformed", f"malformed header: bad token {tok!r}")
        tokens.append(int(tok))
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise PpmError("malformed", "malformed header: missing separator before data")
    return tokens, pos + 1


def decode_ppm(buf):
    """Parse a binary P6 pixmap with maxval 255."""
    if buf[:2] != b"P6":
        raise PpmError("malformed", "malformed header: not a P6 pixmap")
    (width, height, maxval), offset = _header_tokens(buf)
    if width < 1 or height < 1:
        raise PpmError("malformed", "malformed header: non-positive dimensions")
    if maxval != 255:
        raise PpmError("maxval", f"unsupported maxval {maxval}")
    need = 3 * width * height
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise PpmError("truncated", f"truncated data: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return RgbImage(arr.copy())


def load_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def save_ppm(img, path):
    """Write ``img`` to ``path`` atomically (temporary file then rename)."""
    atomic_write_bytes(path, encode_ppm(img))
