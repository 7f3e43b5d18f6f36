"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np


def check_image(img, *, name: str = "image", min_size: int = 1, allow_batch: bool = True) -> np.ndarray:
    """Return ``img`` as a float32 ``(N, H, W, 3)`` batch with finite values in [0, 1].

    Accepts a single ``(H, W, 3)`` image or, with ``allow_batch``, a batch.
    uint8 input is scaled by 1/255.
    """
    arr = np.asarray(getattr(img, "data", img))
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / np.float32(255.0)
    elif not np.issubdtype(arr.dtype, np.floating):
        raise TypeError(f"{name}: expected float or uint8 pixels, got dtype {arr.dtype}")
    if arr.ndim == 3:
        arr = arr[None]
    elif arr.ndim != 4 or not allow_batch:
        want = "(H, W, 3) or (N, H, W, 3)" if allow_batch else "(H, W, 3)"
        raise ValueError(f"{name}: expected shape {want}, got {arr.shape}")
    if arr.shape[-1] != 3:
        raise ValueError(f"{name}: expected 3 RGB channels, got {arr.shape[-1]}")
    if arr.shape[1] < min_size or arr.shape[2] < min_size:
        raise ValueError(f"{name}: {arr.shape[1]}x{arr.shape[2]} is smaller than "
                         f"the {min_size}x{min_size} minimum")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or Inf")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: values must lie in [0, 1], got [{arr.min():.3g}, {arr.max():.3g}]")
    return arr.astype(np.float32, copy=False)


def check_pairs(low, high, *, min_size: int = 1) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Validate matched low/high image collections; returns lists of ``(H, W, 3)`` float32 arrays.

    Each collection may be a 4-d array or a sequence of images of varying size;
    every low image must match its partner's shape.
    """
    lows, highs = _as_list(low, "X"), _as_list(high, "y")
    if len(lows) != len(highs):
        raise ValueError(f"X has {len(lows)} images but y has {len(highs)}")
    if not lows:
        raise ValueError("no training images")
    out_l, out_h = [], []
    for i, (a, b) in enumerate(zip(lows, highs)):
        a = check_image(a, name=f"X[{i}]", min_size=min_size, allow_batch=False)[0]
        b = check_image(b, name=f"y[{i}]", min_size=min_size, allow_batch=False)[0]
        if a.shape != b.shape:
            raise ValueError(f"pair {i}: X shape {a.shape} differs from y shape {b.shape}")
        out_l.append(a)
        out_h.append(b)
    return out_l, out_h


def _as_list(x, name: str) -> list:
    if isinstance(x, np.ndarray):
        if x.ndim == 3:
            return [x]
        if x.ndim == 4:
            return list(x)
        raise ValueError(f"{name}: expected 3-d or 4-d array, got {x.ndim}-d")
    return list(x)
