"""Minimal PPM/PNG writers and density heatmaps with particle overlays."""

import struct
import zlib

import numpy as np

from ..metrics import GridSpec
from ..variational_score import ParticleEnsemble

MARK = (220, 30, 30)


def encode_ppm(rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def _chunk(tag, data):
    body = tag + data
    return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)


def encode_png(rgb):
    """8-bit RGB PNG, filter type 0 on every row."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    raw = np.concatenate([np.zeros((h, 1), dtype=np.uint8), rgb.reshape(h, w * 3)], axis=1).tobytes()
    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", header) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")


def _density_values(source, grid):
    if source is None or isinstance(source, ParticleEnsemble):
        return np.ones(grid.points)
    if hasattr(source, "conditional"):
        source = source.conditional
    if hasattr(source, "density"):
        vals = source.density(grid.coords())
    elif callable(source):
        vals = source(grid.coords())
    else:
        vals = source
    return np.asarray(vals, dtype=np.float64).reshape(grid.points)


def density_image(source, grid, particles=None):
    """RGB array: gray heatmap (dark = high density), particles in red.

    Columns run along the first axis left to right, rows along the second
    axis top to bottom from high to low values.
    """
    if grid.dim != 2:
        raise ValueError(f"density images need a 2D grid, got dimension {grid.dim}")
    vals = _density_values(source, grid)
    lo, hi = float(vals.min()), float(vals.max())
    if hi > lo:
        level = np.rint(255.0 * (1.0 - (vals - lo) / (hi - lo)))
    else:
        level = np.full(vals.shape, 255.0)
    gray = level.astype(np.uint8).T[::-1]
    img = np.repeat(gray[:, :, None], 3, axis=2)
    if particles is None and isinstance(source, ParticleEnsemble):
        particles = source.particles
    if particles is not None:
        pts = np.atleast_2d(np.asarray(getattr(particles, "particles", particles), dtype=np.float64))
        if pts.shape[1] != 2:
            raise ValueError("particle overlay needs 2D points")
        (x0, x1), (y0, y1) = grid.bounds
        nx, ny = grid.points
        cols = np.rint((pts[:, 0] - x0) / (x1 - x0) * (nx - 1)).astype(np.int64)
        rows = ny - 1 - np.rint((pts[:, 1] - y0) / (y1 - y0) * (ny - 1)).astype(np.int64)
        for r, c in zip(rows, cols):
            if 0 <= r < ny and 0 <= c < nx:
                img[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2] = MARK
    return img


def render_density_image(source, grid, path, particles=None, fmt=None):
    """Write a heatmap of ``source`` (mixture, callable, values or ensemble) to ``path``.

    ``fmt`` is ``"ppm"`` or ``"png"`` and defaults to the path suffix.
    Returns the bytes written.
    """
    if not isinstance(grid, GridSpec):
        raise TypeError("grid must be a GridSpec")
    fmt = fmt or str(path).rsplit(".", 1)[-1].lower()
    if fmt not in ("ppm", "png"):
        raise ValueError(f"image format must be 'ppm' or 'png', got {fmt!r}")
    img = density_image(source, grid, particles)
    data = encode_ppm(img) if fmt == "ppm" else encode_png(img)
    with open(path, "wb") as fh:
        fh.write(data)
    return data
