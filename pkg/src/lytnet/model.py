"""LYT-Net blocks and full-model assembly.

Parameters live in a flat ordered mapping (``ModelParams``) keyed by dotted
names; every forward function takes that mapping plus a name prefix, so the
same block code serves the luminance and chrominance branches.
"""
from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .color import rgb_to_yuv
from .tensor import Tensor, default_dtype, ops


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``base_width`` is the feature width of both branches entering the head
    (and of MSEF). The chrominance denoiser runs internally at ``cwd_width``
    with its own attention dimension ``cwd_embed_dim``.
    """

    base_width: int = 32
    mhsa_embed_dim: int = 32
    mhsa_heads: int = 4
    msef_hidden: int = 2
    cwd_width: int = 16
    cwd_embed_dim: int = 16
    use_y_cwd: bool = False
    use_uv_cwd: bool = True
    use_msef: bool = True
    final_head_widths: tuple = (24, 3)
    global_residual: bool = False
    pool_factor: int = 8
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "final_head_widths", tuple(int(w) for w in self.final_head_widths))
        self.validate()

    def validate(self) -> None:
        widths = [self.base_width, self.mhsa_embed_dim, self.mhsa_heads, self.msef_hidden,
                  self.cwd_width, self.cwd_embed_dim, *self.final_head_widths]
        if any(w < 1 for w in widths):
            raise ConfigError(f"all widths must be >= 1, got {widths}")
        for dim in (self.mhsa_embed_dim, self.cwd_embed_dim):
            if dim % self.mhsa_heads:
                raise ConfigError(f"embedding dim {dim} not divisible by {self.mhsa_heads} heads")
        if not self.final_head_widths or self.final_head_widths[-1] != 3:
            raise ConfigError("final_head_widths must end with 3 (RGB output)")
        if self.pool_factor not in (2, 4, 8):
            raise ConfigError("pool_factor must divide the padding multiple of 8")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["final_head_widths"] = list(self.final_head_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**dict(d))

    def with_variant(self, y_cwd: bool | None = None, uv_cwd: bool | None = None,
                     msef: bool | None = None) -> "ModelConfig":
        changes = {}
        if y_cwd is not None:
            changes["use_y_cwd"] = y_cwd
        if uv_cwd is not None:
            changes["use_uv_cwd"] = uv_cwd
        if msef is not None:
            changes["use_msef"] = msef
        return dataclasses.replace(self, **changes)


@dataclass
class ModelParams:
    """Ordered name -> Tensor collection with the config it was built for."""

    tensors: "OrderedDict[str, Tensor]"
    config: ModelConfig
    init: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad))
                        for k, v in self.tensors.items()),
            self.config, dict(self.init))

    def copy(self) -> "ModelParams":
        return ModelParams(
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=v.requires_grad))
                        for k, v in self.tensors.items()),
            self.config, dict(self.init))


# ------------------------------------------------------------ init

INIT_SCHEME = {
    "dense": "truncated_normal(std=0.02, |z|<=2std)",
    "conv": "he_uniform(bound=sqrt(6/fan_in))",
    "bias": "zeros",
    "layer_norm": "gain=1, shift=0",
}


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()

    def _add(self, name, arr):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        self.tensors[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

    def conv(self, name, cin, cout, k=3):
        bound = math.sqrt(6.0 / (k * k * cin))
        self._add(f"{name}.w", self.rng.uniform(-bound, bound, (k, k, cin, cout)))
        self._add(f"{name}.b", np.zeros(cout))

    def depthwise(self, name, c, k=3):
        bound = math.sqrt(6.0 / (k * k))
        self._add(f"{name}.w", self.rng.uniform(-bound, bound, (k, k, c)))
        self._add(f"{name}.b", np.zeros(c))

    def dense(self, name, din, dout, bias=True):
        w = self.rng.standard_normal((din, dout))
        bad = np.abs(w) > 2.0
        while bad.any():
            w[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(w) > 2.0
        self._add(f"{name}.w", 0.02 * w)
        if bias:
            self._add(f"{name}.b", np.zeros(dout))

    def layer_norm(self, name, c):
        self._add(f"{name}.gain", np.ones(c))
        self._add(f"{name}.shift", np.zeros(c))

    def mhsa(self, name, c, d):
        self.dense(f"{name}.q", c, d, bias=False)
        self.dense(f"{name}.k", c, d, bias=False)
        self.dense(f"{name}.v", c, d, bias=False)
        self.dense(f"{name}.out", d, c, bias=True)

    def pooled_path(self, name, cin, cfg: ModelConfig):
        c = cfg.base_width
        self.conv(f"{name}.conv_in", cin, c)
        self.mhsa(f"{name}.mhsa", c, cfg.mhsa_embed_dim)
        self.conv(f"{name}.conv_out", c, c)

    def cwd(self, name, cin, cfg: ModelConfig):
        w, c = cfg.cwd_width, cfg.base_width
        self.conv(f"{name}.enc0", cin, w)
        for i in (1, 2, 3):
            self.conv(f"{name}.enc{i}", w, w)
        self.mhsa(f"{name}.mhsa", w, cfg.cwd_embed_dim)
        self.conv(f"{name}.dec0", w, w)
        self.conv(f"{name}.dec1", w, w)
        self.conv(f"{name}.dec2", w, c)

    def msef(self, name, cfg: ModelConfig):
        c, h = cfg.base_width, cfg.msef_hidden
        self.layer_norm(f"{name}.ln", c)
        self.dense(f"{name}.reduce", c, h)
        self.dense(f"{name}.expand", h, c)
        self.depthwise(f"{name}.dw", c)


def init_params(config: ModelConfig | None = None, seed: int = 0, dtype=None) -> ModelParams:
    """Fresh parameters for ``config`` from a seeded generator."""
    config = config or ModelConfig()
    dtype = dtype or default_dtype()
    b = _Builder(np.random.default_rng(seed), dtype)
    if config.use_y_cwd:
        b.cwd("y.cwd", 1, config)
    else:
        b.pooled_path("y.path", 1, config)
    if config.use_uv_cwd:
        b.cwd("uv.cwd", 2, config)
    else:
        b.pooled_path("uv.path", 2, config)
    if config.use_msef:
        b.msef("msef", config)
    cin = 2 * config.base_width
    for i, cout in enumerate(config.final_head_widths):
        b.conv(f"head.{i}", cin, cout)
        cin = cout
    return ModelParams(b.tensors, config, {"seed": seed, "scheme": dict(INIT_SCHEME)})


def count_params(params: ModelParams | Mapping[str, Tensor]) -> int:
    tensors = params.tensors if isinstance(params, ModelParams) else params
    return int(sum(t.size for t in tensors.values()))


# ------------------------------------------------------------ blocks

def _conv(x, params, name, stride=1):
    return ops.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride)


def mhsa_forward(f_in: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Multi-head self-attention over the H*W positions of an NHWC map.

    Bias-free Q/K/V projections to ``D`` dims, ``heads`` independent
    softmax(Q K^T / sqrt(d_k)) V attentions, concatenation and a biased output
    projection back to the input width. No positional encoding, so the block is
    equivariant to permutations of the positions.
    """
    n, h, w, c = f_in.shape
    wq = params[f"{prefix}.q.w"]
    d = wq.shape[1]
    if d % heads:
        raise ConfigError(f"embedding dim {d} not divisible by {heads} heads")
    dk = d // heads
    x = ops.reshape(f_in, (n, h * w, c))

    def split(t):
        return ops.transpose(ops.reshape(t, (n, h * w, heads, dk)), (0, 2, 1, 3))

    q = split(ops.dense(x, wq))
    k = split(ops.dense(x, params[f"{prefix}.k.w"]))
    v = split(ops.dense(x, params[f"{prefix}.v.w"]))
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    attn = ops.softmax(scores, axis=-1)
    out = ops.matmul(attn, v)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (n, h * w, d))
    out = ops.dense(out, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])
    return ops.reshape(out, (n, h, w, c))


def _check_divisible(x: Tensor, by: int, what: str) -> None:
    if x.shape[1] % by or x.shape[2] % by:
        raise ValueError(f"{what} needs H and W divisible by {by}, got {x.shape[1]}x{x.shape[2]}")


def cwd_forward(f_in: Tensor, params, prefix: str, heads: int = 4) -> Tensor:
    """Channel-wise denoiser: a 3-level U-shape with attention at the bottleneck.

    Encoder: conv(s1) then three conv(s2), ReLU after each. The bottleneck
    runs MHSA at 1/8 resolution. Each decoder stage bilinearly upsamples x2,
    adds the matching encoder features, and applies a 3x3 conv (ReLU on all but
    the last).
    """
    _check_divisible(f_in, 8, "cwd_forward")
    e1 = ops.relu(_conv(f_in, params, f"{prefix}.enc0"))
    e2 = ops.relu(_conv(e1, params, f"{prefix}.enc1", stride=2))
    e3 = ops.relu(_conv(e2, params, f"{prefix}.enc2", stride=2))
    e4 = ops.relu(_conv(e3, params, f"{prefix}.enc3", stride=2))
    b = mhsa_forward(e4, params, f"{prefix}.mhsa", heads)
    d = ops.relu(_conv(ops.upsample_bilinear(b, 2) + e3, params, f"{prefix}.dec0"))
    d = ops.relu(_conv(ops.upsample_bilinear(d, 2) + e2, params, f"{prefix}.dec1"))
    return _conv(ops.upsample_bilinear(d, 2) + e1, params, f"{prefix}.dec2")


def pooled_path_forward(x: Tensor, params, prefix: str, config: ModelConfig) -> Tensor:
    """conv -> avg-pool -> MHSA -> bilinear upsample -> conv, plus a skip from the pre-pool features."""
    p = config.pool_factor
    _check_divisible(x, p, "pooled path")
    f = ops.relu(_conv(x, params, f"{prefix}.conv_in"))
    a = mhsa_forward(ops.pool2d(f, "avg", p), params, f"{prefix}.mhsa", config.mhsa_heads)
    return _conv(ops.upsample_bilinear(a, p), params, f"{prefix}.conv_out") + f


def luminance_path_forward(y: Tensor, params, config: ModelConfig) -> Tensor:
    if config.use_y_cwd:
        return cwd_forward(y, params, "y.cwd", config.mhsa_heads)
    return pooled_path_forward(y, params, "y.path", config)


def chrominance_path_forward(uv: Tensor, params, config: ModelConfig) -> Tensor:
    if config.use_uv_cwd:
        return cwd_forward(uv, params, "uv.cwd", config.mhsa_heads)
    return pooled_path_forward(uv, params, "uv.path", config)


def msef_forward(f_in: Tensor, params, prefix: str = "msef", eps: float = 1e-5) -> Tensor:
    """Squeeze-excite fusion with a depthwise-modulated residual.

    One LayerNorm evaluation ``z`` feeds every term::

        s = relu(reduce(global_avg(z)))
        e = tanh(expand(s)) * z
        out = dwconv(z) * e + f_in
    """
    z = ops.layer_norm(f_in, params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.shift"], eps)
    pooled = ops.pool2d(z, "global_avg")
    s_red = ops.relu(ops.dense(pooled, params[f"{prefix}.reduce.w"], params[f"{prefix}.reduce.b"]))
    gate = ops.tanh(ops.dense(s_red, params[f"{prefix}.expand.w"], params[f"{prefix}.expand.b"]))
    s_exp = gate * z
    dw = ops.depthwise_conv2d(z, params[f"{prefix}.dw.w"], params[f"{prefix}.dw.b"])
    return dw * s_exp + f_in


def _pad_amounts(n: int, multiple: int = 8) -> int:
    return (-n) % multiple


def model_forward(rgb, params: ModelParams, config: ModelConfig | None = None,
                  min_size: int = 16) -> Tensor:
    """Enhance an ``(N, H, W, 3)`` RGB batch; returns raw (unclamped) RGB of the same shape.

    Inputs are reflect-padded on the bottom/right to a multiple of 8 and the
    output is cropped back.
    """
    config = config or params.config
    x = rgb if isinstance(rgb, Tensor) else Tensor(np.asarray(rgb))
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected an (N, H, W, 3) RGB image, got shape {x.shape}")
    n, h, w, _ = x.shape
    if h < min_size or w < min_size:
        raise ValueError(f"image {h}x{w} is smaller than the {min_size}x{min_size} minimum")
    ph, pw = _pad_amounts(h), _pad_amounts(w)
    xp = ops.pad_reflect(x, (0, ph), (0, pw)) if (ph or pw) else x

    yuv = rgb_to_yuv(xp)
    yf = luminance_path_forward(yuv[..., 0:1], params, config)
    uvf = chrominance_path_forward(yuv[..., 1:3], params, config)
    if config.use_msef:
        uvf = msef_forward(uvf, params, "msef", config.ln_eps)
    feat = ops.concat([yf, uvf], axis=-1)
    last = len(config.final_head_widths) - 1
    for i in range(last + 1):
        feat = _conv(feat, params, f"head.{i}")
        if i < last:
            feat = ops.relu(feat)
    if config.global_residual:
        feat = feat + xp
    if ph or pw:
        feat = feat[:, :h, :w, :]
    return feat


# ------------------------------------------------------ accounting

def block_param_counts(params: ModelParams) -> "OrderedDict[str, int]":
    """Parameter totals grouped by block prefix (``y.path``, ``uv.cwd``, ``msef``, ``head``)."""
    groups: "OrderedDict[str, int]" = OrderedDict()
    for name, t in params.items():
        parts = name.split(".")
        key = parts[0] if parts[0] in ("msef", "head") else ".".join(parts[:2])
        groups[key] = groups.get(key, 0) + t.size
    return groups


def msef_param_formula(c: int, hidden: int, layer_norms: int = 1, dw_bias: bool = True) -> int:
    """Closed-form MSEF size: LayerNorm(s) + reduce FC + expand FC + 3x3 depthwise conv."""
    return layer_norms * 2 * c + (c * hidden + hidden) + (hidden * c + c) + 9 * c + (c if dw_bias else 0)


def _conv_count(cin, cout, k=3):
    return k * k * cin * cout + cout


def cwd_decoder_param_counts(config: ModelConfig, transposed_kernel: int = 4) -> dict:
    """Decoder size with interpolation upsampling vs learned transposed-conv upsampling.

    The transposed variant inserts a ``transposed_kernel`` x ``transposed_kernel``
    stride-2 transposed conv (width-preserving, biased) in place of each
    bilinear upsample, keeping the same refinement convs.
    """
    w, c = config.cwd_width, config.base_width
    interp = 2 * _conv_count(w, w) + _conv_count(w, c)
    transposed = interp + 3 * _conv_count(w, w, transposed_kernel)
    return {"interpolation": interp, "transposed": transposed, "ratio": interp / transposed}


# (Y-CWD, UV-CWD, MSEF) -> published parameter count for that toggle row
REPORTED_ABLATION_PARAMS = OrderedDict([
    ((True, False, False), 40238),
    ((False, True, False), 44377),
    ((True, True, False), 48516),
    ((True, False, True), 40784),
    ((False, True, True), 44923),
    ((True, True, True), 49062),
])
REPORTED_MSEF_DELTA = 546


def ablation_table(config: ModelConfig | None = None) -> list[dict]:
    """Parameter counts for each ablation toggle row next to the reported values."""
    config = config or ModelConfig()
    rows = []
    for (y, uv, ms), reported in REPORTED_ABLATION_PARAMS.items():
        cfg = config.with_variant(y, uv, ms)
        p = init_params(cfg, seed=0)
        total = count_params(p)
        rows.append({
            "y_cwd": y, "uv_cwd": uv, "msef": ms, "params": total,
            "reported": reported, "delta": total - reported,
            "blocks": dict(block_param_counts(p)),
        })
    return rows
