"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def check_images(X, resolution: int | None = None, channels: int = 3, atol: float = 1e-3) -> np.ndarray:
    """``[n, r, r, channels]`` float32 array with finite values in [-1, 1]."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != arr.shape[2] or arr.shape[3] != channels:
        raise ValueError(f"images must be [n, r, r, {channels}], got {arr.shape}")
    if resolution is not None and arr.shape[1] != resolution:
        raise ValueError(f"expected {resolution}px images, got {arr.shape[1]}px")
    if not np.isfinite(arr).all():
        raise ValueError("images contain NaN or Inf")
    if arr.min() < -1 - atol or arr.max() > 1 + atol:
        raise ValueError("image values must lie in [-1, 1]")
    return arr


def check_captions(X) -> list[str]:
    if isinstance(X, str):
        raise ValueError("expected a sequence of captions, got a single string")
    caps = list(X)
    if not caps:
        raise ValueError("no captions given")
    for i, c in enumerate(caps):
        if not isinstance(c, str) or not c.strip():
            raise ValueError(f"caption {i} is empty or not a string")
    return caps


def check_labels(y, n: int, n_classes: int | None = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("labels must be integers")
    if arr.min() < 0 or (n_classes is not None and arr.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return arr.astype(np.int64)


def check_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (int, np.integer, Sequence)):
        return np.random.default_rng(seed)
    raise ValueError(f"cannot make a random generator from {seed!r}")
