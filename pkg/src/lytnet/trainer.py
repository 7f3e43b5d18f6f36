"""ADAM + cosine-annealed training loop and checkpoint persistence."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import checkpoint as ckpt
from .checkpoint import CheckpointError
from .data import ImagePair, augment_pair, prefetch, sample_rng
from .losses import ConvFeatureExtractor, LossWeights, hybrid_loss
from .model import ModelConfig, ModelParams, init_params, model_forward
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 1
    lr_init: float = 2e-4
    lr_final: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    crop: int = 256
    checkpoint_every: int = 0
    max_steps: int | None = None
    grad_clip: float | None = None
    augment: bool = True
    shuffle: bool = True
    prefetch: int = 2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_final > self.lr_init:
            raise ValueError(f"lr_final {self.lr_final} exceeds lr_init {self.lr_init}")

    def steps_per_epoch(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.batch_size)

    def total_steps(self, n_samples: int) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return self.epochs * self.steps_per_epoch(n_samples)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass
class TrainState:
    """Optimizer moments and position; data randomness is keyed on (seed, epoch, index)."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr: float = 0.0
    seed: int = 0


class TrainingDiverged(RuntimeError):
    pass


def cosine_lr(step: int, total_steps: int, lr_init: float = 2e-4, lr_final: float = 1e-6) -> float:
    """Half-cosine from ``lr_init`` at step 0 to ``lr_final`` at ``total_steps`` (clamped beyond)."""
    if total_steps <= 0:
        return lr_final
    t = min(max(step, 0), total_steps) / total_steps
    w = 0.5 * (1.0 + math.cos(math.pi * t))
    return lr_init * w + lr_final * (1.0 - w)


def adam_step(params: ModelParams | Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: TrainState, rate: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected ADAM update; replaces each parameter tensor and bumps ``state.step``."""
    names = list(params.keys() if isinstance(params, Mapping) else params.names())
    for name in names:
        if params[name].shape != grads[name].shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, "
                             f"parameter has {params[name].shape}")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in names:
        p = params[name]
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        update = rate * (m / c1) / (np.sqrt(v / c2) + eps)
        params[name] = Tensor((p.data - update).astype(p.dtype, copy=False), requires_grad=True)
    state.step = t
    state.lr = rate


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ------------------------------------------------------------ loop

@dataclass
class TrainResult:
    params: ModelParams
    state: TrainState
    history: list


def _epoch_order(dataset, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    if hasattr(dataset, "order"):
        return dataset.order(epoch, shuffle)
    if not shuffle:
        return np.arange(len(dataset))
    return np.random.default_rng([seed, epoch]).permutation(len(dataset))


def _batches(dataset: Sequence[ImagePair], cfg: TrainConfig, start: int, total: int):
    spe = cfg.steps_per_epoch(len(dataset))
    order, order_epoch = None, -1
    for step in range(start, total):
        epoch, pos = divmod(step, spe)
        if epoch != order_epoch:
            order, order_epoch = _epoch_order(dataset, cfg.seed, epoch, cfg.shuffle), epoch
        idxs = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        lows, highs = [], []
        for i in idxs:
            pair = dataset[int(i)]
            if cfg.augment:
                pair = augment_pair(pair, sample_rng(cfg.seed, epoch, int(i)), cfg.crop)
            lows.append(pair.low)
            highs.append(pair.high)
        yield step, np.stack(lows), np.stack(highs)


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: Sequence[ImagePair], *,
          loss_weights: LossWeights | None = None, extractor=None,
          params: ModelParams | None = None, state: TrainState | None = None,
          checkpoint_path=None, log_path=None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimise the hybrid loss over ``dataset`` with ADAM and a per-step cosine schedule.

    Passing ``params``/``state`` from a checkpoint resumes exactly where the
    saved run stopped.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg = train_config
    weights = loss_weights or LossWeights()
    extractor = extractor if extractor is not None else ConvFeatureExtractor()
    params = params if params is not None else init_params(model_config, seed=cfg.seed)
    state = state if state is not None else TrainState(seed=cfg.seed)
    total = cfg.total_steps(len(dataset))
    horizon = max(total - 1, 1)
    history: list[dict] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    source = _batches(dataset, cfg, state.step, total)
    if cfg.prefetch:
        source = prefetch(source, cfg.prefetch)
    try:
        for step, low, high in source:
            lr = cosine_lr(step, horizon, cfg.lr_init, cfg.lr_final)
            pred = model_forward(Tensor(low), params, model_config)
            loss, comps = hybrid_loss(pred, Tensor(high), weights, extractor, return_components=True)
            if not all(math.isfinite(v) for v in comps.values()):
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, params, state, cfg, weights)
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (lr={lr:.3e}): "
                    + ", ".join(f"{k}={v:.4g}" for k, v in comps.items())
                    + (f"; last good weights kept in {checkpoint_path}" if checkpoint_path else ""))
            grads = backward(loss, params.tensors)
            if cfg.grad_clip:
                clip_grad_norm(grads, cfg.grad_clip)
            adam_step(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            record = {"step": step, "lr": lr, **comps}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if callback:
                callback(record)
            if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params, state, cfg, weights)
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, state, cfg, weights)
    return TrainResult(params, state, history)


# ------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: ModelParams
    state: TrainState | None
    train_config: TrainConfig | None
    loss_weights: LossWeights | None
    manifest: dict


def save_checkpoint(path, params: ModelParams, state: TrainState | None = None,
                    train_config: TrainConfig | None = None,
                    loss_weights: LossWeights | None = None) -> None:
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict(
        (name, t.data) for name, t in params.items())
    if state is not None:
        for name in params.names():
            if name in state.m:
                tensors[f"adam.m/{name}"] = state.m[name]
                tensors[f"adam.v/{name}"] = state.v[name]
    manifest = {
        "kind": "lytnet",
        "model_config": params.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "loss_weights": loss_weights.to_dict() if loss_weights else None,
        "init": params.init,
        "train_state": None if state is None else {"step": state.step, "lr": state.lr, "seed": state.seed},
        "rng": None if state is None else {
            "generator": "numpy PCG64", "seed": state.seed,
            "streams": "default_rng([seed, epoch]) for order, default_rng([seed, epoch, index]) per sample",
        },
    }
    ckpt.write_container(path, tensors, manifest)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint, validating every tensor against the model config.

    With ``expected_config``, the stored tensors must also fit that config;
    the first mismatching entry is reported.
    """
    manifest, tensors = ckpt.read_container(path)
    if manifest.get("kind") != "lytnet":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={manifest.get('kind')!r})")
    try:
        stored_cfg = ModelConfig.from_dict(manifest["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model_config in manifest ({exc})") from exc
    cfg = expected_config or stored_cfg
    reference = init_params(cfg, seed=0)
    stored_names = [n for n in tensors if not n.startswith("adam.")]
    for name in reference.names():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r} required by the model config")
        if tensors[name].shape != reference[name].shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {list(tensors[name].shape)}, "
                f"model config expects {list(reference[name].shape)}")
    extra = [n for n in stored_names if n not in reference]
    if extra:
        raise CheckpointError(f"{path}: tensor {extra[0]!r} is not part of the model config")
    params = ModelParams(
        OrderedDict((n, Tensor(tensors[n], requires_grad=True)) for n in reference.names()),
        cfg, manifest.get("init") or {})
    state = None
    ts = manifest.get("train_state")
    if ts is not None:
        state = TrainState(step=int(ts["step"]), lr=float(ts["lr"]), seed=int(ts["seed"]))
        for n in reference.names():
            if f"adam.m/{n}" in tensors:
                state.m[n] = tensors[f"adam.m/{n}"]
                state.v[n] = tensors[f"adam.v/{n}"]
    tc = manifest.get("train_config")
    lw = manifest.get("loss_weights")
    return Checkpoint(params, state,
                      TrainConfig.from_dict(tc) if tc else None,
                      LossWeights.from_dict(lw) if lw else None,
                      manifest)
