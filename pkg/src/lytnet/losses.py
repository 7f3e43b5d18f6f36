"""The hybrid training loss and its six components, all differentiable.

Every component takes ``pred`` and ``target`` as ``(N, H, W, 3)`` tensors and
returns a scalar tensor. ``target`` is treated as a constant.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .tensor import Tensor, no_grad, ops

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5
PSNR_MSE_FLOOR = 1e-8
PSNR_LOSS_OFFSET = 40.0

COMPONENT_KEYS = ("L_S", "L_Perc", "L_Hist", "L_PSNR", "L_Color", "L_MSSSIM")


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.06     # perceptual
    alpha2: float = 0.05     # histogram
    alpha3: float = 0.0083   # PSNR
    alpha4: float = 0.25     # colour
    alpha5: float = 0.5      # MS-SSIM
    smooth_l1_beta: float = 1.0
    hist_bins: int = 256
    hist_bandwidth: float = 1.0 / 256
    msssim_scales: int = 5

    def __post_init__(self):
        alphas = (self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.alpha5)
        if any(a < 0 for a in alphas):
            raise ValueError(f"loss weights must be non-negative, got {alphas}")
        if self.hist_bins < 2:
            raise ValueError("hist_bins must be >= 2")
        if not 1 <= self.msssim_scales <= 5:
            raise ValueError("msssim_scales must be in [1, 5]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossWeights":
        return cls(**dict(d))


def _check_pair(pred: Tensor, target: Tensor, name: str) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"{name}: shape mismatch {pred.shape} vs {target.shape}")


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return Tensor(x.data)
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


# ----------------------------------------------------------- components

def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    target = _const(target, pred)
    _check_pair(pred, target, "smooth_l1")
    return ops.mean(ops.smooth_l1_elementwise(pred - target, beta))


class FeatureExtractor(Protocol):
    def features(self, x: Tensor) -> Sequence[Tensor]: ...


class IdentityExtractor:
    """Single tap returning the image itself (perceptual loss becomes MSE)."""

    def features(self, x: Tensor) -> list[Tensor]:
        return [x]


class ConvFeatureExtractor:
    """Frozen random conv stack used in place of a pretrained VGG.

    Three 3x3 conv + ReLU stages (stride 1, 2, 2); the output of each stage is
    a tap. Weights are He-uniform from ``seed`` unless loaded from a file.
    """

    def __init__(self, widths: Sequence[int] = (8, 16, 32), seed: int = 0, dtype=np.float32,
                 weights: Mapping[str, np.ndarray] | None = None):
        self.widths = tuple(int(w) for w in widths)
        self.seed = seed
        self.strides = tuple(1 if i == 0 else 2 for i in range(len(self.widths)))
        self.weights: dict[str, np.ndarray] = {}
        if weights is not None:
            self._load(weights, dtype)
        else:
            rng = np.random.default_rng(seed)
            cin = 3
            for i, cout in enumerate(self.widths):
                bound = math.sqrt(6.0 / (9 * cin))
                self.weights[f"extractor.{i}.w"] = rng.uniform(-bound, bound, (3, 3, cin, cout)).astype(dtype)
                self.weights[f"extractor.{i}.b"] = np.zeros(cout, dtype=dtype)
                cin = cout

    def _load(self, weights, dtype) -> None:
        cin = 3
        for i, cout in enumerate(self.widths):
            for suffix, shape in (("w", (3, 3, cin, cout)), ("b", (cout,))):
                key = f"extractor.{i}.{suffix}"
                if key not in weights:
                    raise ValueError(f"extractor weights missing {key!r}")
                arr = np.asarray(weights[key])
                if arr.shape != shape:
                    raise ValueError(f"extractor weight {key!r} has shape {arr.shape}, expected {shape}")
                self.weights[key] = arr.astype(dtype)
            cin = cout

    def astype(self, dtype) -> "ConvFeatureExtractor":
        return ConvFeatureExtractor(self.widths, self.seed, dtype, weights=self.weights)

    def features(self, x: Tensor) -> list[Tensor]:
        taps = []
        h = x
        for i, stride in enumerate(self.strides):
            w = Tensor(self.weights[f"extractor.{i}.w"].astype(x.dtype, copy=False))
            b = Tensor(self.weights[f"extractor.{i}.b"].astype(x.dtype, copy=False))
            h = ops.relu(ops.conv2d(h, w, b, stride=stride))
            taps.append(h)
        return taps

    def save(self, path) -> None:
        from .checkpoint import write_container
        write_container(path, self.weights, {"kind": "extractor", "widths": list(self.widths),
                                             "seed": self.seed})

    @classmethod
    def load(cls, path) -> "ConvFeatureExtractor":
        from .checkpoint import CheckpointError, read_container
        manifest, tensors = read_container(path)
        if manifest.get("kind") != "extractor" or "widths" not in manifest:
            raise CheckpointError(f"{path}: manifest is not an extractor weight file "
                                  f"(kind={manifest.get('kind')!r})")
        try:
            return cls(manifest["widths"], manifest.get("seed", 0), weights=tensors)
        except ValueError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc


def perceptual_loss(pred: Tensor, target, extractor: FeatureExtractor | None = None) -> Tensor:
    """Mean squared feature difference, averaged over the extractor's taps."""
    target = _const(target, pred)
    _check_pair(pred, target, "perceptual_loss")
    extractor = extractor if extractor is not None else ConvFeatureExtractor(dtype=pred.dtype)
    with no_grad():
        tgt = [Tensor(f.data) for f in extractor.features(target)]
    fp = extractor.features(pred)
    terms = [ops.mean(ops.power(a - b, 2.0)) for a, b in zip(fp, tgt)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def normalized_histogram(x: Tensor, bins: int, bandwidth: float) -> Tensor:
    h = ops.soft_histogram(x, bins, bandwidth)
    return h / (ops.sum(h) + 1e-12)


def histogram_loss(pred: Tensor, target, bins: int = 256, bandwidth: float = 1.0 / 256) -> Tensor:
    """Per-channel L1 distance between Gaussian soft histograms on [0, 1], channel-averaged."""
    target = _const(target, pred)
    _check_pair(pred, target, "histogram_loss")
    c = pred.shape[-1]
    total = None
    for ch in range(c):
        hp = normalized_histogram(pred[..., ch], bins, bandwidth)
        with no_grad():
            ht = normalized_histogram(target[..., ch], bins, bandwidth)
        d = ops.sum(ops.abs(hp - ht))
        total = d if total is None else total + d
    return total * (1.0 / c)


def psnr_loss(pred: Tensor, target) -> Tensor:
    """``40 - PSNR`` with peak 1 and MSE floored at 1e-8 (so the minimum is -40)."""
    target = _const(target, pred)
    _check_pair(pred, target, "psnr_loss")
    mse = ops.mean(ops.power(pred - target, 2.0))
    psnr = ops.log(ops.clamp_min(mse, PSNR_MSE_FLOOR)) * (-10.0 / math.log(10.0))
    return PSNR_LOSS_OFFSET - psnr


def color_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute difference of per-channel means."""
    target = _const(target, pred)
    _check_pair(pred, target, "color_loss")
    axes = tuple(range(pred.ndim - 1))
    return ops.mean(ops.abs(ops.mean(pred, axis=axes) - ops.mean(target, axis=axes)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _gauss_filter(x: Tensor, win: np.ndarray) -> Tensor:
    c = x.shape[-1]
    kv = Tensor(np.repeat(win[:, None, None], c, axis=2).astype(x.dtype))
    kh = Tensor(np.repeat(win[None, :, None], c, axis=2).astype(x.dtype))
    return ops.depthwise_conv2d(ops.depthwise_conv2d(x, kv, padding="valid"), kh, padding="valid")


def ssim_terms(x: Tensor, y: Tensor, win: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Mean SSIM and mean contrast-structure term over all valid windows and channels."""
    win = gaussian_window() if win is None else win
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_x, mu_y = _gauss_filter(x, win), _gauss_filter(y, win)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = _gauss_filter(x * x, win) - mu_xx
    s_yy = _gauss_filter(y * y, win) - mu_yy
    s_xy = _gauss_filter(x * y, win) - mu_xy
    cs = (s_xy * 2.0 + c2) / (s_xx + s_yy + c2)
    lum = (mu_xy * 2.0 + c1) / (mu_xx + mu_yy + c1)
    return ops.mean(lum * cs), ops.mean(cs)


def msssim_scales_for(min_extent: int, requested: int = 5) -> int:
    if min_extent < SSIM_WINDOW:
        raise ValueError(f"image extent {min_extent} smaller than the {SSIM_WINDOW}-pixel SSIM window")
    scales = requested
    while scales > 1 and min_extent < SSIM_WINDOW * 2 ** (scales - 1):
        scales -= 1
    return scales


def ms_ssim(pred: Tensor, target, scales: int = 5) -> Tensor:
    """Multi-scale SSIM with the standard per-scale exponents.

    When the image is too small for ``scales`` levels, fewer are used (with a
    warning). The exponents of the levels in use are renormalised to sum to 1,
    so MS-SSIM of identical images is exactly 1 at any depth.
    """
    target = _const(target, pred)
    _check_pair(pred, target, "ms_ssim")
    use = msssim_scales_for(min(pred.shape[1], pred.shape[2]), scales)
    if use < scales:
        warnings.warn(f"MS-SSIM: image {pred.shape[1]}x{pred.shape[2]} supports {use} scales, "
                      f"not {scales}", RuntimeWarning, stacklevel=2)
    weights = np.asarray(MS_SSIM_WEIGHTS[:use])
    weights = weights / weights.sum()
    win = gaussian_window()
    x, y = pred, target
    result = None
    for level in range(use):
        ssim_val, cs = ssim_terms(x, y, win)
        term = ssim_val if level == use - 1 else cs
        factor = ops.power(ops.clamp_min(term, 1e-6), float(weights[level]))
        result = factor if result is None else result * factor
        if level < use - 1:
            x = ops.pool2d(x, "avg", 2)
            y = ops.pool2d(y, "avg", 2)
    return result


def ms_ssim_loss(pred: Tensor, target, scales: int = 5) -> Tensor:
    return 1.0 - ms_ssim(pred, target, scales)


# --------------------------------------------------------------- hybrid

def hybrid_loss(pred: Tensor, target, weights: LossWeights | None = None,
                extractor: FeatureExtractor | None = None, return_components: bool = False):
    """``L_S + a1 L_Perc + a2 L_Hist + a3 L_PSNR + a4 L_Color + a5 L_MS-SSIM``.

    With ``return_components`` the result is ``(total, {name: float})`` where
    the dict also carries ``L_total``.
    """
    w = weights or LossWeights()
    target = _const(target, pred)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        comps = {
            "L_S": smooth_l1(pred, target, w.smooth_l1_beta),
            "L_Perc": perceptual_loss(pred, target, extractor),
            "L_Hist": histogram_loss(pred, target, w.hist_bins, w.hist_bandwidth),
            "L_PSNR": psnr_loss(pred, target),
            "L_Color": color_loss(pred, target),
            "L_MSSSIM": ms_ssim_loss(pred, target, w.msssim_scales),
        }
    total = (comps["L_S"] + comps["L_Perc"] * w.alpha1 + comps["L_Hist"] * w.alpha2
             + comps["L_PSNR"] * w.alpha3 + comps["L_Color"] * w.alpha4
             + comps["L_MSSSIM"] * w.alpha5)
    if not return_components:
        return total
    logged = {k: float(v.data) for k, v in comps.items()}
    logged["L_total"] = float(total.data)
    return total, logged


def combine(components: Mapping[str, float], weights: LossWeights | None = None) -> float:
    """Re-add logged components with the hybrid weights."""
    w = weights or LossWeights()
    return (components["L_S"] + w.alpha1 * components["L_Perc"] + w.alpha2 * components["L_Hist"]
            + w.alpha3 * components["L_PSNR"] + w.alpha4 * components["L_Color"]
            + w.alpha5 * components["L_MSSSIM"])
