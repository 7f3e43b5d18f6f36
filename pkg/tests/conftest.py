import numpy as np
import pytest

from lytnet.data import ImagePair, encode_png


def textured_image(h, w, seed=0):
    """Smooth random colour field plus a few edges; values in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((h, w, 3))
    for c in range(3):
        fx, fy, ph = rng.uniform(1, 6, 3)
        img[..., c] = 0.5 + 0.3 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    img[h // 3: h // 2, w // 4: w // 2] += 0.2
    img += rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def darken(img, seed=0, gain=0.15, gamma=1.2, noise=0.01):
    rng = np.random.default_rng(seed)
    out = gain * np.asarray(img, np.float64) ** gamma + rng.normal(0, noise, img.shape)
    return np.clip(out, 0, 1).astype(np.float32)


def synthetic_pair(h, w, seed=0, name="p.png"):
    high = textured_image(h, w, seed)
    return ImagePair(darken(high, seed + 100), high, name)


def write_layout(root, split, n, size=(32, 48), seed=0):
    """LOL-style ``<root>/<split>/{low,high}/NNN.png`` tree with n pairs."""
    for sub in ("low", "high"):
        (root / split / sub).mkdir(parents=True, exist_ok=True)
    for i in range(n):
        pair = synthetic_pair(*size, seed=seed + i)
        encode_png(pair.low, root / split / "low" / f"{i:03d}.png")
        encode_png(pair.high, root / split / "high" / f"{i:03d}.png")
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def lol_root(tmp_path):
    write_layout(tmp_path, "train", 3)
    write_layout(tmp_path, "test", 2, seed=50)
    return tmp_path
