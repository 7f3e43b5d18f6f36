"""RGB <-> YUV (BT.601 analog, zero-centred chroma) and sRGB -> CIE Lab (D65).

The YUV functions accept either numpy arrays or :class:`~lytnet.tensor.Tensor`
objects with channels last; on tensors they are differentiable.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, ops

KR, KG, KB = 0.299, 0.587, 0.114
U_SCALE = 0.492
V_SCALE = 0.877

# linear sRGB -> XYZ, D65
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
# reference white is the image of RGB (1, 1, 1), so greys land on a = b = 0
D65_WHITE = SRGB_TO_XYZ.sum(axis=1)


def _split(img):
    if isinstance(img, Tensor):
        return img[..., 0:1], img[..., 1:2], img[..., 2:3]
    img = np.asarray(img)
    return img[..., 0:1], img[..., 1:2], img[..., 2:3]


def _join(parts):
    if isinstance(parts[0], Tensor):
        return ops.concat(parts, axis=-1)
    return np.concatenate(parts, axis=-1)


def rgb_to_yuv(img):
    """Y in [0, 1]; U = 0.492 (B - Y), V = 0.877 (R - Y).

    Chroma is evaluated from channel differences, which makes U and V exactly
    zero whenever R == G == B.
    """
    r, g, b = _split(img)
    y = r * KR + g * KG + b * KB
    u = ((b - r) * KR + (b - g) * KG) * U_SCALE
    v = ((r - g) * KG + (r - b) * KB) * V_SCALE
    return _join([y, u, v])


def yuv_to_rgb(img, clamp: bool = True):
    """Algebraic inverse of :func:`rgb_to_yuv`; clamps to [0, 1] unless told not to."""
    y, u, v = _split(img)
    r = y + v * (1.0 / V_SCALE)
    b = y + u * (1.0 / U_SCALE)
    g = (y - r * KR - b * KB) * (1.0 / KG)
    out = _join([r, g, b])
    if clamp:
        if isinstance(out, Tensor):
            raise TypeError("clamping is an I/O boundary operation; pass clamp=False for tensors")
        out = np.clip(out, 0.0, 1.0)
    return out


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., 0] * KR + img[..., 1] * KG + img[..., 2] * KB


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def srgb_to_lab(img) -> np.ndarray:
    """sRGB in [0, 1] (channels last) to CIE L*a*b* under D65."""
    if isinstance(img, Tensor):
        img = img.data
    lin = srgb_to_linear(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0))
    xyz = lin @ SRGB_TO_XYZ.T
    t = xyz / D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta * delta) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)
