"""Paired low/normal-light datasets, PNG codec boundary, and augmentation."""
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

LOL_V1_COUNTS = {"train": 485, "test": 15}
# public LOL-v1 archives use these directory names for the two splits
SPLIT_ALIASES = {"train": ("train", "our485"), "test": ("test", "eval15")}


class DatasetError(ValueError):
    pass


class ImagePair(NamedTuple):
    low: np.ndarray
    high: np.ndarray
    name: str = ""


# ------------------------------------------------------------- codec

def decode_png(path) -> np.ndarray:
    """8-bit PNG -> float32 ``(H, W, 3)`` array of ``value / 255``."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise DatasetError(f"{path}: not a PNG file (format {im.format})")
            if im.mode in ("I;16", "I;16B", "I;16L", "I", "F") or im.info.get("bitdepth", 8) > 8:
                raise DatasetError(f"{path}: {im.mode} PNG is not 8-bit; only 8-bit RGB is supported")
            if im.mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except DatasetError:
        raise
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{path}: cannot decode PNG ({exc})") from exc
    return arr.astype(np.float32) / np.float32(255.0)


def to_uint8(img) -> np.ndarray:
    """Clamp to [0, 1], scale by 255 and round half away from zero."""
    img = np.asarray(img, dtype=np.float64)
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_png(img, path) -> None:
    arr = np.asarray(img)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"encode_png takes one image, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    path = Path(path)
    try:
        Image.fromarray(to_uint8(arr), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DatasetError(f"{path}: cannot write PNG ({exc})") from exc


# ----------------------------------------------------------- dataset

def _layout_help(root: Path, split: str) -> str:
    return (f"expected layout: {root}/{split}/low/*.png and {root}/{split}/high/*.png "
            f"(aliases for '{split}': {', '.join(SPLIT_ALIASES.get(split, (split,)))})")


@dataclass
class PairedDataset:
    root: Path
    split: str
    entries: list = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> ImagePair:
        low, high = self.entries[i]
        return ImagePair(decode_png(low), decode_png(high), Path(low).name)

    def order(self, epoch: int, shuffle: bool = True) -> np.ndarray:
        """Visit order for ``epoch``; a pure function of (seed, epoch)."""
        if not shuffle:
            return np.arange(len(self))
        return np.random.default_rng([self.seed, epoch]).permutation(len(self))


def load_dataset(root, split: str = "train", seed: int = 0,
                 expected_counts: dict | None = LOL_V1_COUNTS) -> PairedDataset:
    """Pair ``<root>/<split>/low/X.png`` with ``<root>/<split>/high/X.png``."""
    root = Path(root)
    base = None
    for name in SPLIT_ALIASES.get(split, (split,)):
        if (root / name / "low").is_dir() and (root / name / "high").is_dir():
            base = root / name
            break
    if base is None:
        raise DatasetError(f"{root}: no '{split}' split found; " + _layout_help(root, split))
    lows = {p.name: p for p in (base / "low").iterdir() if p.suffix.lower() == ".png"}
    highs = {p.name: p for p in (base / "high").iterdir() if p.suffix.lower() == ".png"}
    if not lows and not highs:
        raise DatasetError(f"{base}: no PNG files; " + _layout_help(root, split))
    orphans = sorted(set(lows) ^ set(highs))
    if orphans:
        detail = ", ".join(
            f"{n} (only in {'low' if n in lows else 'high'})" for n in orphans[:10])
        raise DatasetError(f"{base}: {len(orphans)} unpaired file(s): {detail}")
    entries = [(lows[n], highs[n]) for n in sorted(lows)]
    log.info("loaded %s split from %s: %d pairs", split, base, len(entries))
    if expected_counts and split in expected_counts and len(entries) != expected_counts[split]:
        log.warning("%s split has %d pairs; LOL-v1 has %d", split, len(entries), expected_counts[split])
    return PairedDataset(root, split, entries, seed)


# ------------------------------------------------------ augmentation

def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (epoch, sample) so prefetch order cannot matter."""
    return np.random.default_rng([seed, epoch, index])


def _resize_short_side(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F")
                        .resize((nw, nh), Image.BILINEAR)) for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).astype(img.dtype)


def augment_pair(pair: ImagePair, rng: np.random.Generator, crop: int = 256) -> ImagePair:
    """Same random crop, flips and k*90 degree rotation applied to both images."""
    low, high = pair.low, pair.high
    if low.shape != high.shape:
        raise DatasetError(f"pair {pair.name!r}: low {low.shape} and high {high.shape} differ")
    h, w = low.shape[:2]
    if h < crop or w < crop:
        log.info("pair %r is %dx%d, smaller than crop %d; resizing", pair.name, h, w, crop)
        low, high = _resize_short_side(low, crop), _resize_short_side(high, crop)
        h, w = low.shape[:2]
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip_v, flip_h, k = (int(v) for v in rng.integers(0, [2, 2, 4]))

    def apply(img):
        img = img[top:top + crop, left:left + crop]
        if flip_v:
            img = img[::-1]
        if flip_h:
            img = img[:, ::-1]
        return np.ascontiguousarray(np.rot90(img, k, axes=(0, 1)))

    return ImagePair(apply(low), apply(high), pair.name)


def prefetch(items: Iterable, size: int = 2) -> Iterator:
    """Produce ``items`` from a background thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=size)
    done = object()
    errors: list = []

    def worker():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            errors.append(exc)
        finally:
            q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()
    if errors:
        raise errors[0]
