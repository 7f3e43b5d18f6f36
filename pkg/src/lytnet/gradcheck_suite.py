"""Finite-difference verification suite for ops, blocks, losses and the full model.

Everything runs in float64. Each case builds a scalar function of some input
tensors and reports the worst relative error between backprop and central
differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import losses
from .model import ModelConfig, cwd_forward, init_params, mhsa_forward, model_forward, msef_forward
from .tensor import Tensor, inject_fault, ops, precision
from .tensor.gradcheck import finite_diff_report

OP_TOL = 1e-5
COMPOSITE_TOL = 1e-4
MODULES = ("ops", "mhsa", "cwd", "msef", "losses", "model")
MAX_KINK_FRACTION = 0.1


@dataclass
class CaseResult:
    module: str
    name: str
    error: float
    raw_error: float
    tol: float
    seconds: float
    probed: int = 0
    kinks: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol) and self.kinks <= MAX_KINK_FRACTION * self.probed


@dataclass
class _Case:
    module: str
    name: str
    build: Callable[[np.random.Generator], tuple[Callable, list[Tensor]]]
    tol: float
    eps: float = 1e-6
    max_coords: int | None = None
    skip_kinks: bool = False
    kink_tol: float = 1e-2


def _projected(fn, rng):
    """Reduce a tensor-valued ``fn`` to a scalar via a fixed random projection."""
    cache = {}

    def f(*xs):
        out = fn(*xs)
        if out.shape not in cache:
            cache[out.shape] = Tensor(rng.standard_normal(out.shape))
        return ops.sum(out * cache[out.shape])

    return f


def _u(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape))


def _unary(fn, lo=-1.0, hi=1.0, shape=(1, 4, 5, 3)):
    return lambda rng: (_projected(fn, rng), [_u(rng, shape, lo, hi)])


def _binary(fn):
    return lambda rng: (_projected(fn, rng), [_u(rng, (1, 4, 5, 3)), _u(rng, (1, 1, 1, 3), 0.5, 1.5)])


def _conv_case(stride):
    def build(rng):
        f = _projected(lambda x, w, b: ops.conv2d(x, w, b, stride=stride), rng)
        return f, [_u(rng, (1, 5, 6, 2)), _u(rng, (3, 3, 2, 3)), _u(rng, (3,))]
    return build


def _op_cases() -> list[_Case]:
    table = {
        "add": _binary(ops.add), "sub": _binary(ops.sub),
        "mul": _binary(ops.mul), "div": _binary(ops.div),
        "relu": _unary(ops.relu), "tanh": _unary(ops.tanh), "exp": _unary(ops.exp),
        "abs": _unary(ops.abs), "log": _unary(ops.log, 0.5, 2.0), "sqrt": _unary(ops.sqrt, 0.5, 2.0),
        "power": _unary(lambda x: ops.power(x, 2.5), 0.5, 2.0),
        "clamp_min": _unary(lambda x: ops.clamp_min(x, 0.1)),
        "smooth_l1": _unary(lambda x: ops.smooth_l1_elementwise(x * 2.0, 1.0)),
        "sum": _unary(lambda x: ops.sum(x, axis=(1, 2))),
        "mean": _unary(lambda x: ops.mean(x, axis=-1)),
        "softmax": _unary(lambda x: ops.softmax(x, axis=-1)),
        "layer_norm": lambda rng: (
            _projected(lambda x, g, s: ops.layer_norm(x, g, s), rng),
            [_u(rng, (1, 3, 4, 5)), _u(rng, (5,), 0.5, 1.5), _u(rng, (5,))]),
        "conv2d": _conv_case(1),
        "conv2d_stride2": _conv_case(2),
        "depthwise_conv2d": lambda rng: (
            _projected(ops.depthwise_conv2d, rng),
            [_u(rng, (1, 5, 6, 3)), _u(rng, (3, 3, 3)), _u(rng, (3,))]),
        "dense": lambda rng: (
            _projected(ops.dense, rng), [_u(rng, (1, 3, 4, 3)), _u(rng, (3, 4)), _u(rng, (4,))]),
        "matmul": lambda rng: (
            _projected(ops.matmul, rng), [_u(rng, (2, 3, 4)), _u(rng, (2, 4, 5))]),
        "avg_pool": _unary(lambda x: ops.pool2d(x, "avg", 2), shape=(1, 4, 6, 2)),
        "max_pool": _unary(lambda x: ops.pool2d(x, "max", 2), shape=(1, 4, 6, 2)),
        "global_avg_pool": _unary(lambda x: ops.pool2d(x, "global_avg")),
        "upsample_bilinear": _unary(lambda x: ops.upsample_bilinear(x, 2), shape=(1, 3, 4, 2)),
        "pad_reflect": _unary(lambda x: ops.pad_reflect(x, (0, 2), (1, 3))),
        "concat": lambda rng: (
            _projected(lambda a, b: ops.concat([a, b], axis=-1), rng),
            [_u(rng, (1, 3, 4, 2)), _u(rng, (1, 3, 4, 1))]),
        "transpose_reshape": _unary(lambda x: ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (1, -1))),
        "slice": _unary(lambda x: x[:, 1:3, ::2, :]),
        "soft_histogram": _unary(lambda x: ops.soft_histogram(x, 32, 1.0 / 32), 0.0, 1.0, shape=(40,)),
    }
    return [_Case("ops", name, build, OP_TOL) for name, build in table.items()]


def _tiny_config(**kw) -> ModelConfig:
    base = dict(base_width=4, mhsa_embed_dim=4, mhsa_heads=2, msef_hidden=2,
                cwd_width=4, cwd_embed_dim=4, final_head_widths=(4, 3))
    base.update(kw)
    return ModelConfig(**base)


def _params_as_inputs(prefix_filter: str, cfg: ModelConfig, rng):
    params = init_params(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    names = [n for n in params.names() if n.startswith(prefix_filter)]
    # zero-initialised biases make some paths trivially linear; perturb them
    for n in names:
        params[n] = Tensor(params[n].data + rng.normal(0, 0.1, params[n].shape))
    return params, names


def _block_case(prefix: str, forward, shape, cfg: ModelConfig):
    def build(rng):
        params, names = _params_as_inputs(prefix, cfg, rng)

        def fn(x, *ps):
            view = dict(zip(names, ps))
            return forward(x, view)

        return _projected(fn, rng), [_u(rng, shape)] + [params[n] for n in names]
    return build


def _block_cases() -> list[_Case]:
    cfg = _tiny_config()
    return [
        _Case("mhsa", "mhsa", _block_case(
            "uv.cwd.mhsa", lambda x, p: mhsa_forward(x, p, "uv.cwd.mhsa", 2), (1, 2, 3, 4), cfg),
            COMPOSITE_TOL),
        _Case("cwd", "cwd", _block_case(
            "uv.cwd", lambda x, p: cwd_forward(x, p, "uv.cwd", 2), (1, 8, 8, 2), cfg),
            COMPOSITE_TOL, max_coords=24),
        _Case("msef", "msef", _block_case(
            "msef", lambda x, p: msef_forward(x, p, "msef"), (1, 4, 5, 4), cfg),
            COMPOSITE_TOL),
    ]


def _loss_case(name, fn, size=(1, 12, 12, 3), eps=1e-6):
    # prediction = target + noise, so SSIM terms stay positive and unclamped
    def build(rng):
        target = rng.uniform(0.1, 0.9, size)
        pred = target + rng.normal(0, 0.05, size)
        return (lambda p: fn(p, Tensor(target))), [Tensor(pred)]
    return _Case("losses", name, build, COMPOSITE_TOL, eps=eps)


def _loss_cases() -> list[_Case]:
    ext = losses.ConvFeatureExtractor(seed=0, dtype=np.float64)
    weights = losses.LossWeights(msssim_scales=1)
    return [
        _loss_case("smooth_l1", losses.smooth_l1),
        _loss_case("perceptual", lambda p, t: losses.perceptual_loss(p, t, ext)),
        _loss_case("histogram", losses.histogram_loss, size=(1, 6, 6, 3)),
        _loss_case("psnr", losses.psnr_loss),
        _loss_case("color", losses.color_loss),
        # window-corner pixels carry ~1e-8 gradients; a wider step keeps them above rounding
        _loss_case("ms_ssim", lambda p, t: losses.ms_ssim_loss(p, t, scales=1), eps=1e-4),
        _loss_case("ms_ssim_2scale", lambda p, t: losses.ms_ssim_loss(p, t, scales=2),
                   size=(1, 24, 24, 2), eps=1e-4),
        _loss_case("hybrid", lambda p, t: losses.hybrid_loss(p, t, weights, ext)),
    ]


def _model_case() -> _Case:
    cfg = ModelConfig()

    def build(rng):
        params = init_params(cfg, seed=0, dtype=np.float64)
        for n in params.names():
            params[n] = Tensor(params[n].data + rng.normal(0, 0.02, params[n].shape))
        names = params.names()

        def fn(x, *ps):
            view = dict(zip(names, ps))
            return model_forward(x, view, cfg, min_size=8)

        return _projected(fn, rng), [_u(rng, (1, 8, 8, 3), 0.0, 1.0)] + [params[n] for n in names]

    # rounding-limited at 1e-6; wider steps cross ReLU hinges, which are detected and skipped
    return _Case("model", "full_model_8x8", build, COMPOSITE_TOL, eps=2e-6, max_coords=4,
                 skip_kinks=True, kink_tol=1e-3)


def all_cases() -> list[_Case]:
    return _op_cases() + _block_cases() + _loss_cases() + [_model_case()]


def run_suite(modules: Iterable[str] = ("all",), fault: str | None = None,
              seed: int = 0) -> list[CaseResult]:
    """Run every case in ``modules`` (``"all"`` selects everything).

    ``fault`` names an op whose backward is sign-flipped for the duration,
    which the suite must then report as failing.
    """
    wanted = set(modules)
    if "all" in wanted:
        wanted = set(MODULES)
    unknown = wanted - set(MODULES)
    if unknown:
        raise ValueError(f"unknown gradcheck modules {sorted(unknown)}; choose from {MODULES}")
    results = []
    faults = (fault,) if fault else ()
    with precision(np.float64), inject_fault(*faults):
        for case in all_cases():
            if case.module not in wanted:
                continue
            rng = np.random.default_rng([seed, len(results)])
            t0 = time.perf_counter()
            f, inputs = case.build(rng)
            rep = finite_diff_report(f, inputs, eps=case.eps, max_coords=case.max_coords,
                                     seed=seed, skip_kinks=case.skip_kinks,
                                     kink_tol=case.kink_tol)
            results.append(CaseResult(case.module, case.name, rep.error, rep.raw_error, case.tol,
                                      time.perf_counter() - t0, rep.probed, rep.kinks))
    return results


def format_report(results: list[CaseResult]) -> str:
    lines = [f"{'module':<8} {'case':<20} {'max rel err':>12} {'raw':>10} {'tol':>8} "
             f"{'probed':>6} {'kinks':>5}  status"]
    for r in results:
        lines.append(f"{r.module:<8} {r.name:<20} {r.error:>12.3e} {r.raw_error:>10.2e} {r.tol:>8.0e} "
                     f"{r.probed:>6} {r.kinks:>5}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    worst = max(results, key=lambda r: r.error / r.tol) if results else None
    if worst is not None:
        lines.append(f"worst: {worst.module}/{worst.name} {worst.error:.3e}")
    return "\n".join(lines)
