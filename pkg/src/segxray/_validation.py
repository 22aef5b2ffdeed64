"""Input validation shared by the estimators and analysis functions."""
from __future__ import annotations

import numpy as np


def check_images(X, *, n_channels: int | None = None, dtype=np.float32) -> np.ndarray:
    """Return ``X`` as an ``(N, C, H, W)`` array; a single ``(C, H, W)`` image is promoted."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, C, H, W) or (C, H, W), got {X.shape}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    return X


def check_label_maps(y, X=None, *, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"expected label maps shaped (N, H, W), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("label maps must be integer valued")
        y = y.astype(np.int64)
    if X is not None and (y.shape[0] != X.shape[0] or y.shape[1:] != X.shape[2:]):
        raise ValueError(f"label maps {y.shape} do not match images {X.shape}")
    if n_classes is not None and y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def check_same_shape(a, b, what: str = "masks"):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{what} differ in shape: {a.shape} vs {b.shape}")
    return a, b


def check_binary(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be binary")
        mask = mask.astype(bool)
    return mask
