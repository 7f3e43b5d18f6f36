"""Command-line entry point: ``lytnet {train,enhance,eval,gradcheck,params}``.

Exit codes: 0 ok, 1 internal error (including a diverged run or a failing
gradient check), 2 data error, 3 checkpoint error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .data import DatasetError, decode_png, encode_png, load_dataset
from .losses import LossWeights
from .metrics import evaluate_pair, summarize, write_csv
from .model import (REPORTED_MSEF_DELTA, ConfigError, ModelConfig, ablation_table, block_param_counts,
                    count_params, cwd_decoder_param_counts, init_params, model_forward)
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, TrainingDiverged, load_checkpoint, train

log = logging.getLogger("lytnet")

EXIT_OK, EXIT_INTERNAL, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3
# bad flags or config share argparse's usage-error status
EXIT_USAGE = 2
VARIANT_KEYS = ("y_cwd", "uv_cwd", "msef")
MIN_SIZE = 16


class UsageError(Exception):
    pass


def parse_variant(text: str) -> dict:
    """``"uv_cwd,msef"`` -> ``{"use_y_cwd": False, "use_uv_cwd": True, "use_msef": True}``."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if parts == ["none"]:
        parts = []
    unknown = [p for p in parts if p not in VARIANT_KEYS]
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown variant component(s) {unknown}; choose from {', '.join(VARIANT_KEYS)} or 'none'")
    return {f"use_{k}": k in parts for k in VARIANT_KEYS}


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = set(data) - {"model", "train", "loss"}
    if unknown:
        raise UsageError(f"config file {path}: unknown sections {sorted(unknown)}; "
                         "expected 'model', 'train', 'loss'")
    return data


def resolve_config(args) -> dict:
    """Merge defaults, then the JSON file, then explicit flags."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    model = ModelConfig().to_dict()
    model.update(file_cfg.get("model", {}))
    if getattr(args, "variant", None) is not None:
        model.update(args.variant)
    train_cfg = TrainConfig().to_dict()
    train_cfg.update(file_cfg.get("train", {}))
    for key in ("epochs", "seed", "max_steps", "batch_size", "crop", "lr_init", "lr_final",
                "checkpoint_every"):
        val = getattr(args, key, None)
        if val is not None:
            train_cfg[key] = val
    loss = LossWeights().to_dict()
    loss.update(file_cfg.get("loss", {}))
    try:
        return {"model": ModelConfig.from_dict(model).to_dict(),
                "train": TrainConfig.from_dict(train_cfg).to_dict(),
                "loss": LossWeights.from_dict(loss).to_dict()}
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _echo(kind: str, payload: dict) -> None:
    print(f"{kind}: {json.dumps(payload, sort_keys=True)}", flush=True)


# ------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _echo("config", cfg)
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_cfg = TrainConfig.from_dict(cfg["train"])
    dataset = load_dataset(args.data, "train", seed=train_cfg.seed)
    params = state = None
    if args.resume:
        ck = load_checkpoint(args.resume, model_cfg)
        params, state = ck.params, ck.state
        log.info("resuming from %s at step %d", args.resume, state.step if state else 0)
    try:
        result = train(model_cfg, train_cfg, dataset, loss_weights=LossWeights.from_dict(cfg["loss"]),
                       params=params, state=state, checkpoint_path=args.out, log_path=args.log,
                       callback=_progress_logger(args.log_every))
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_INTERNAL
    last = result.history[-1] if result.history else {}
    _echo("done", {"steps": result.state.step, "checkpoint": str(args.out),
                   "final_loss": last.get("L_total")})
    return EXIT_OK


def _progress_logger(every: int):
    def cb(record):
        if every and record["step"] % every == 0:
            log.info("step %d lr %.3e loss %.5f", record["step"], record["lr"], record["L_total"])
    return cb


def _enhance_array(img: np.ndarray, params) -> np.ndarray:
    with no_grad():
        out = model_forward(Tensor(img[None]), params, min_size=MIN_SIZE)
    return np.clip(out.data[0], 0.0, 1.0)


def _png_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DatasetError(f"{path}: no PNG files to enhance")
        return files
    if not path.exists():
        raise DatasetError(f"{path}: no such file or directory")
    return [path]


def cmd_enhance(args) -> int:
    ck = load_checkpoint(args.ckpt)
    _echo("config", {"ckpt": str(args.ckpt), "in": str(args.input), "out": str(args.output),
                     "gt_mean": args.gt_mean, "model": ck.params.config.to_dict()})
    src = Path(args.input)
    files = _png_inputs(src)
    out = Path(args.output)
    if src.is_dir():
        out.mkdir(parents=True, exist_ok=True)
    for f in files:
        img = decode_png(f)
        if min(img.shape[:2]) < MIN_SIZE:
            raise DatasetError(f"{f}: image is {img.shape[0]}x{img.shape[1]}; "
                               f"the minimum is {MIN_SIZE}x{MIN_SIZE}")
        dest = out / f.name if src.is_dir() else out
        encode_png(_enhance_array(img, ck.params), dest)
        log.info("wrote %s", dest)
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    _echo("config", {"ckpt": str(args.ckpt), "data": str(args.data), "split": args.split,
                     "gt_mean": args.gt_mean, "model": ck.params.config.to_dict()})
    dataset = load_dataset(args.data, args.split, expected_counts=None)
    if len(dataset) == 0:
        raise DatasetError(f"{args.data}: '{args.split}' split is empty")
    records = []
    for i in range(len(dataset)):
        pair = dataset[i]
        pred = _enhance_array(pair.low, ck.params)
        records.append(evaluate_pair(pair.name, pred, pair.high, args.gt_mean))
    csv_path = Path(args.csv) if args.csv else Path(args.ckpt).with_suffix(".eval.csv")
    write_csv(records, csv_path)
    _echo("summary", {**summarize(records), "gt_mean": args.gt_mean, "csv": str(csv_path)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import format_report, run_suite
    modules = [m.strip() for m in args.module.split(",") if m.strip()]
    _echo("config", {"module": modules, "inject_fault": args.inject_fault, "seed": args.seed})
    try:
        results = run_suite(modules, fault=args.inject_fault, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(format_report(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases passed")
    return EXIT_INTERNAL if failed else EXIT_OK


def cmd_params(args) -> int:
    cfg = resolve_config(args)
    model_cfg = ModelConfig.from_dict(cfg["model"])
    _echo("config", {"model": cfg["model"]})
    params = init_params(model_cfg)
    enabled = [k for k in VARIANT_KEYS if getattr(model_cfg, f"use_{k}")]
    print(f"selected variant: {', '.join(enabled) or 'none'}")
    for block, n in block_param_counts(params).items():
        print(f"  {block:<10} {n:>8,}")
    print(f"  {'total':<10} {count_params(params):>8,}")
    print()
    rows = ablation_table(model_cfg)
    print(f"{'Y-CWD':>5} {'UV-CWD':>6} {'MSEF':>5} {'params':>8} {'reported':>9} {'delta':>7}  blocks")
    for r in rows:
        blocks = " ".join(f"{k}={v}" for k, v in r["blocks"].items())
        print(f"{_tick(r['y_cwd']):>5} {_tick(r['uv_cwd']):>6} {_tick(r['msef']):>5} "
              f"{r['params']:>8,} {r['reported']:>9,} {r['delta']:>+7,}  {blocks}")
    with_msef = count_params(init_params(model_cfg.with_variant(msef=True)))
    without = count_params(init_params(model_cfg.with_variant(msef=False)))
    print(f"\nMSEF delta: {with_msef - without} (reported {REPORTED_MSEF_DELTA})")
    dec = cwd_decoder_param_counts(model_cfg)
    print(f"CWD decoder: interpolation {dec['interpolation']:,} vs transposed-conv "
          f"{dec['transposed']:,} (ratio {dec['ratio']:.3f})")
    return EXIT_OK


def _tick(flag: bool) -> str:
    return "x" if flag else "-"


# -------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lytnet", description="Low-light image enhancement toolkit.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a paired dataset")
    p.add_argument("--data", required=True, help="dataset root containing train/{low,high}")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--config", help="JSON file with 'model', 'train' and 'loss' sections")
    p.add_argument("--variant", type=parse_variant, help="enabled components, e.g. uv_cwd,msef")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--lr-init", dest="lr_init", type=float)
    p.add_argument("--lr-final", dest="lr_final", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log", help="append line-delimited JSON step records here")
    p.add_argument("--log-every", dest="log_every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a PNG file or a directory of PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--gt-mean", dest="gt_mean", default="none", choices=["none"],
                   help="no reference is available when enhancing, so only 'none' applies")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="score a checkpoint on a paired split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--gt-mean", dest="gt_mean", default="none", choices=["none", "scale", "gamma"])
    p.add_argument("--csv", help="per-image CSV path (default: <ckpt>.eval.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--module", default="all",
                   help="comma list from all, ops, mhsa, cwd, msef, losses, model")
    p.add_argument("--inject-fault", dest="inject_fault",
                   help="sign-flip this op's backward to confirm the check catches it")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter audit across ablation variants")
    p.add_argument("--variant", type=parse_variant, help="enabled components, e.g. uv_cwd,msef")
    p.add_argument("--config", help="JSON file with a 'model' section")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DatasetError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except CheckpointError as exc:
        log.error("%s", exc)
        return EXIT_CHECKPOINT
    except Exception:  # noqa: BLE001 - top-level guard maps anything else to the internal code
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
