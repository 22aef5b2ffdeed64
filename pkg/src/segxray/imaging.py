"""Resampling and deterministic PNG rendering."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

PALETTES = ("gray", "jet", "red-overlay")


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, clamped at the borders
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(a, size) -> np.ndarray:
    """Bilinear resize of the last two axes to ``size = (H, W)``."""
    a = np.asarray(a, dtype=np.float64)
    H, W = size
    h, w = a.shape[-2:]
    if (h, w) == (H, W):
        return a.copy()
    lo, hi, t = _axis_weights(h, H)
    a = a[..., lo, :] * (1 - t)[:, None] + a[..., hi, :] * t[:, None]
    lo, hi, t = _axis_weights(w, W)
    return a[..., lo] * (1 - t) + a[..., hi] * t


def normalize(a, fixed_range=None) -> np.ndarray:
    """Map to [0, 1]: min -> 0, max -> 1; a zero range maps everything to 0."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = (float(a.min()), float(a.max())) if fixed_range is None else fixed_range
    if hi <= lo:
        return np.zeros_like(a)
    return np.clip((a - lo) / (hi - lo), 0.0, 1.0)


def jet(v) -> np.ndarray:
    """Jet colormap for values in [0, 1]; returns (..., 3)."""
    v = np.asarray(v, dtype=np.float64)
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def to_uint8(v) -> np.ndarray:
    return np.round(np.clip(v, 0, 1) * 255).astype(np.uint8)


def render(tensor, palette="gray", fixed_range=None) -> np.ndarray:
    """Render a 2-D map (or an RGB ``(3, H, W)`` array in [0, 1]) to uint8 pixels."""
    t = np.asarray(tensor)
    if t.ndim == 3 and t.shape[0] == 3:
        rgb = t if fixed_range is None else normalize(t, fixed_range)
        return to_uint8(np.moveaxis(rgb, 0, -1))
    if t.ndim != 2:
        raise ValueError(f"expected a 2-D map or (3, H, W) RGB array, got {t.shape}")
    v = normalize(t, fixed_range)
    if palette == "gray":
        return to_uint8(v)
    if palette == "jet":
        return to_uint8(jet(v))
    if palette == "red-overlay":
        z = np.zeros_like(v)
        return to_uint8(np.stack([v, z, z], axis=-1))
    raise ValueError(f"unknown palette {palette!r}; choose from {PALETTES}")


def export_png(tensor, palette="gray", path="out.png", fixed_range=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render(tensor, palette, fixed_range)).save(path, format="PNG", compress_level=6)
    return path


def heat_overlay(gray, heat, alpha=0.5) -> np.ndarray:
    """Jet heatmap blended over a grayscale image; returns (3, H, W) in [0, 1]."""
    base = np.repeat(normalize(gray)[None], 3, axis=0)
    colour = np.moveaxis(jet(normalize(heat)), -1, 0)
    return (1 - alpha) * base + alpha * colour


def mask_overlay(gray, mask, colour=(1.0, 0.2, 0.2), alpha=0.6) -> np.ndarray:
    base = np.repeat(normalize(gray)[None], 3, axis=0)
    tint = np.asarray(colour, dtype=np.float64)[:, None, None]
    m = np.asarray(mask, dtype=bool)[None]
    return np.where(m, (1 - alpha) * base + alpha * tint, base)


LABEL_COLOURS = np.array([
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],   # edema
    [0.0, 0.4, 1.0],   # non-enhancing core
    [1.0, 0.0, 0.0],   # enhancing
])


def label_overlay(gray, classes, alpha=0.6) -> np.ndarray:
    """Output-class map tinted over grayscale; background left untouched."""
    base = np.repeat(normalize(gray)[None], 3, axis=0)
    classes = np.asarray(classes)
    tint = np.moveaxis(LABEL_COLOURS[classes], -1, 0)
    fg = (classes > 0)[None]
    return np.where(fg, (1 - alpha) * base + alpha * tint, base)
