"""Evaluation metrics: PSNR, SSIM, CIEDE2000 and GT-mean brightness alignment.

Plain numpy in float64; images are ``(H, W, 3)`` arrays in [0, 1]. Predictions
are clamped to [0, 1] before scoring.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .color import luminance, srgb_to_lab

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
CSV_FIELDS = ("id", "psnr", "ssim", "ciede2000", "gt_mean_applied")


def _as_image(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    return arr


def _pair(pred, target, name):
    p, t = _as_image(pred), _as_image(target)
    if p.shape != t.shape:
        raise ValueError(f"{name}: shape mismatch {p.shape} vs {t.shape}")
    return np.clip(p, 0.0, 1.0), t


def psnr(pred, target) -> float:
    """Peak-1 PSNR in dB, capped at 99 (identical images hit the cap)."""
    p, t = _pair(pred, target, "psnr")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian(size=11, sigma=1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(pred, target, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale Gaussian-window SSIM averaged over valid windows and channels."""
    p, t = _pair(pred, target, "ssim")
    if p.shape[0] < win_size or p.shape[1] < win_size:
        raise ValueError(f"ssim: image {p.shape[0]}x{p.shape[1]} smaller than {win_size}x{win_size} window")
    if p.ndim == 2:
        p, t = p[..., None], t[..., None]
    g = _gaussian(win_size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for c in range(p.shape[-1]):
        x, y = p[..., c], t[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(m.mean())
    return float(np.mean(vals))


def ciede2000(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0) -> np.ndarray:
    """Colour difference dE00 between Lab arrays (last axis L, a, b)."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c_bar = 0.5 * (np.hypot(a1, b1) + np.hypot(a2, b2))
    c7 = c_bar ** 7
    g = 0.5 * (1.0 - np.sqrt(c7 / (c7 + 25.0 ** 7)))
    a1p, a2p = (1.0 + g) * a1, (1.0 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, h1p)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, h2p)

    dLp = L2 - L1
    dCp = c2p - c1p
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, dh)
    dh = np.where(dh < -180.0, dh + 360.0, dh)
    cprod = c1p * c2p
    dh = np.where(cprod == 0, 0.0, dh)
    dHp = 2.0 * np.sqrt(cprod) * np.sin(np.radians(dh) / 2.0)

    Lbp = 0.5 * (L1 + L2)
    Cbp = 0.5 * (c1p + c2p)
    hsum = h1p + h2p
    hbar = np.where(np.abs(h1p - h2p) <= 180.0, hsum / 2.0,
                    np.where(hsum < 360.0, (hsum + 360.0) / 2.0, (hsum - 360.0) / 2.0))
    hbar = np.where(cprod == 0, hsum, hbar)

    T = (1.0 - 0.17 * np.cos(np.radians(hbar - 30.0)) + 0.24 * np.cos(np.radians(2 * hbar))
         + 0.32 * np.cos(np.radians(3 * hbar + 6.0)) - 0.20 * np.cos(np.radians(4 * hbar - 63.0)))
    d_theta = 30.0 * np.exp(-(((hbar - 275.0) / 25.0) ** 2))
    cb7 = Cbp ** 7
    Rc = 2.0 * np.sqrt(cb7 / (cb7 + 25.0 ** 7))
    lterm = (Lbp - 50.0) ** 2
    Sl = 1.0 + 0.015 * lterm / np.sqrt(20.0 + lterm)
    Sc = 1.0 + 0.045 * Cbp
    Sh = 1.0 + 0.015 * Cbp * T
    Rt = -np.sin(np.radians(2.0 * d_theta)) * Rc

    tl, tc, th = dLp / (kL * Sl), dCp / (kC * Sc), dHp / (kH * Sh)
    return np.sqrt(tl * tl + tc * tc + th * th + Rt * tc * th)


def ciede2000_image(pred, target) -> float:
    """Mean per-pixel dE00 between two sRGB images."""
    p, t = _pair(pred, target, "ciede2000")
    return float(ciede2000(srgb_to_lab(p), srgb_to_lab(t)).mean())


def gt_mean_adjust(pred, target, mode: str = "scale") -> tuple[np.ndarray, bool]:
    """Align the prediction's mean luminance with the ground truth.

    ``scale`` multiplies by the luminance ratio; ``gamma`` finds the exponent
    with ``mean(Y(pred ** g)) == mean(Y(target))`` by bisection. Returns the
    clamped image and whether an adjustment was made.
    """
    p = np.clip(_as_image(pred), 0.0, 1.0)
    t = _as_image(target)
    if mode == "none":
        return p, False
    yp, yt = luminance(p).mean(), luminance(t).mean()
    if yp < 1e-6:
        log.warning("gt-mean: prediction mean luminance %.2e too small; skipping", yp)
        return p, False
    if mode == "scale":
        return np.clip(p * (yt / yp), 0.0, 1.0), True
    if mode == "gamma":
        lo, hi = np.log(1e-3), np.log(1e3)
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if luminance(p ** np.exp(mid)).mean() > yt:
                lo = mid
            else:
                hi = mid
        return np.clip(p ** np.exp(0.5 * (lo + hi)), 0.0, 1.0), True
    raise ValueError(f"unknown gt-mean mode {mode!r}")


@dataclass
class EvalRecord:
    id: str
    psnr: float
    ssim: float
    ciede2000: float
    gt_mean_applied: bool


def evaluate_pair(image_id: str, pred, target, gt_mean: str = "none") -> EvalRecord:
    p = np.clip(_as_image(pred), 0.0, 1.0)
    applied = False
    if gt_mean != "none":
        p, applied = gt_mean_adjust(p, target, gt_mean)
    return EvalRecord(image_id, psnr(p, target), ssim(p, target), ciede2000_image(p, target), applied)


def write_csv(records: Iterable[EvalRecord], path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            row = asdict(r)
            row["gt_mean_applied"] = str(r.gt_mean_applied).lower()
            w.writerow(row)


def summarize(records: list[EvalRecord]) -> dict:
    if not records:
        raise ValueError("no records to summarise")
    return {
        "n": len(records),
        "psnr": float(np.mean([r.psnr for r in records])),
        "ssim": float(np.mean([r.ssim for r in records])),
        "ciede2000": float(np.mean([r.ciede2000 for r in records])),
    }
