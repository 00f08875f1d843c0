"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array, check_consistent_length, column_or_1d


def check_images(X, *, channels: int | None = None, min_size: int = 8) -> np.ndarray:
    """Validate a batch of images as (n, c, h, w), uint8 or real in [0, 1].

    A 3-D array is read as a batch of single-channel images. Non-finite values, values outside
    [0, 1] for real input, and non-square or too-small images are rejected.
    """
    X = check_array(X, dtype=None, allow_nd=True, ensure_2d=False, input_name="X")
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, c, h, w), got {X.ndim}-d input")
    n, c, h, w = X.shape
    if h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    if h < min_size:
        raise ValueError(f"images must be at least {min_size}x{min_size}, got {h}x{w}")
    if channels is not None and c != channels:
        raise ValueError(f"expected {channels} channels, got {c}")
    if X.dtype == np.uint8:
        return X
    if X.dtype.kind not in "fiu":
        raise ValueError(f"unsupported image dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("real-valued images must lie in [0, 1]")
    return X


def check_labels(y) -> np.ndarray:
    y = column_or_1d(y, warn=True)
    if y.size and y.dtype.kind == "f" and not np.all(np.isfinite(y)):
        raise ValueError("labels contain NaN or infinity")
    return y


def check_images_labels(X, y, **kwargs) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X, **kwargs)
    y = check_labels(y)
    check_consistent_length(X, y)
    return X, y
