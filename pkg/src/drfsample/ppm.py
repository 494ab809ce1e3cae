"""Binary PPM (P6) images for toy latents in [-1, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionError, DRFError

__all__ = ["latent_to_rgb", "rgb_to_latent", "write_ppm", "read_ppm"]


def latent_to_rgb(z):
    """Map a ``(3, H, W)`` latent in [-1, 1] to ``(H, W, 3)`` uint8, clipping outside values."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) latent, got {z.shape}")
    scaled = np.rint((np.clip(z, -1.0, 1.0) + 1.0) * 127.5)
    return scaled.astype(np.uint8).transpose(1, 2, 0)


def rgb_to_latent(rgb):
    rgb = np.asarray(rgb)
    return (rgb.astype(np.float64) / 127.5 - 1.0).transpose(2, 0, 1)


def write_ppm(path, z):
    rgb = latent_to_rgb(z)
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def read_ppm(path):
    """Read a P6 file written by :func:`write_ppm`; returns ``(H, W, 3)`` uint8."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise DRFError(f"{path}: not an 8-bit P6 image")
    w, h = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise DRFError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).copy()
