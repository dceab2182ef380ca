"""Dataset indexing, image decoding, and split bookkeeping.

A dataset is a directory of class subdirectories; the class order is the
sorted subdirectory names.  Images are decoded to RGB, bilinearly resized
with half-pixel-centered sampling, and laid out channels-first as float32
in [0, 255].  No mean subtraction or rescaling happens here: the network
front end expects raw pixel magnitudes (its activation cap is tuned for
them).

Splits are stratified per class with floored ratio counts; remainder
samples go to train first, then val, then test.  A split can instead be
pinned exactly by a manifest file of ``relative_path<TAB>split`` lines,
which makes training runs reproducible across machines.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tiff", ".webp")
SPLIT_NAMES = ("train", "val", "test")
DEFAULT_RATIOS = (0.5, 0.2, 0.3)


@dataclass
class DatasetIndex:
    """Immutable listing of a class-subdirectory dataset."""

    root: str
    class_names: list[str]
    paths: list[str]        # relative to root, forward slashes
    labels: np.ndarray      # int64, parallel to paths
    splits: Optional[dict[str, np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def split_ids(self, name: str) -> np.ndarray:
        if self.splits is None:
            raise ValueError("dataset index carries no split assignment")
        if name not in self.splits:
            raise ValueError(f"unknown split {name!r}")
        return self.splits[name]


def index_dataset(
    root: str,
    ratios: Optional[Sequence[float]] = DEFAULT_RATIOS,
    seed: int = 42,
) -> DatasetIndex:
    """Scan ``root``'s subdirectories; each becomes one class, sorted by name.

    With ``ratios`` given (the default), a stratified train/val/test
    assignment is attached; pass ``ratios=None`` for a bare listing.
    """
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset root {root!r} is not a directory")
    class_names = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)) and not d.startswith(".")
    )
    if not class_names:
        raise ValueError(f"no class subdirectories under {root!r}")
    paths: list[str] = []
    labels: list[int] = []
    for ci, cname in enumerate(class_names):
        cdir = os.path.join(root, cname)
        files = sorted(
            f for f in os.listdir(cdir)
            if f.lower().endswith(IMAGE_EXTENSIONS) and os.path.isfile(os.path.join(cdir, f))
        )
        if not files:
            raise ValueError(f"class directory {cdir!r} holds no images")
        for f in files:
            paths.append(f"{cname}/{f}")
            labels.append(ci)
    index = DatasetIndex(root, class_names, paths, np.asarray(labels, dtype=np.int64))
    if ratios is not None:
        index.splits = stratified_split(index, ratios, seed)
    return index


def stratified_split(
    index: DatasetIndex,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 42,
) -> dict[str, np.ndarray]:
    """Shuffle each class and cut it into train/val/test by the ratios.

    Counts are floored; the remainder is handed out one sample at a time
    in train, val, test order, so no image is ever dropped.
    """
    if len(ratios) != 3:
        raise ValueError("ratios must be (train, val, test)")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    rng = np.random.default_rng(seed)
    out: dict[str, list[np.ndarray]] = {name: [] for name in SPLIT_NAMES}
    for c in range(index.num_classes):
        members = np.flatnonzero(index.labels == c)
        rng.shuffle(members)
        counts = [int(len(members) * r) for r in ratios]
        leftover = len(members) - sum(counts)
        for i in range(leftover):
            counts[i % 3] += 1
        start = 0
        for name, cnt in zip(SPLIT_NAMES, counts):
            out[name].append(members[start : start + cnt])
            start += cnt
    return {
        name: np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
        for name, parts in out.items()
    }


def write_manifest(index: DatasetIndex, splits: dict[str, np.ndarray], path: str) -> None:
    """Persist a split assignment as ``relative_path<TAB>split`` lines."""
    assign: dict[int, str] = {}
    for name, idxs in splits.items():
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}")
        for i in idxs:
            assign[int(i)] = name
    lines = []
    for i, rel in enumerate(index.paths):
        if i not in assign:
            raise ValueError(f"sample {rel!r} missing from splits")
        lines.append(f"{rel}\t{assign[i]}\n")
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    os.replace(tmp, path)


def read_manifest(index: DatasetIndex, path: str) -> dict[str, np.ndarray]:
    """Load a split assignment; every indexed sample must be covered."""
    by_rel = {rel: i for i, rel in enumerate(index.paths)}
    buckets: dict[str, list[int]] = {name: [] for name in SPLIT_NAMES}
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            rel, sep, split = line.partition("\t")
            if not sep or split not in SPLIT_NAMES:
                raise ValueError(f"{path}:{ln}: expected 'relative_path<TAB>train|val|test'")
            if rel not in by_rel:
                raise ValueError(f"{path}:{ln}: {rel!r} is not in the dataset")
            if rel in seen:
                raise ValueError(f"{path}:{ln}: duplicate entry {rel!r}")
            seen.add(rel)
            buckets[split].append(by_rel[rel])
    missing = set(index.paths) - seen
    if missing:
        raise ValueError(f"manifest misses {len(missing)} samples, e.g. {sorted(missing)[0]!r}")
    return {name: np.asarray(sorted(v), dtype=np.int64) for name, v in buckets.items()}


def decode_image(path: str) -> np.ndarray:
    """Read any common image file to (h, w, 3) uint8 RGB."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resample with half-pixel-centered coordinates.

    Accepts (h, w) or (h, w, c); returns float32 of the requested size.
    Edge samples clamp to the border row/column.
    """
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ValueError(f"target size must be positive, got {out_hw}")
    arr = np.asarray(img, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected (h, w) or (h, w, c), got shape {arr.shape}")
    h, w = arr.shape[:2]
    if (h, w) == (oh, ow):
        out = arr.copy()
        return out[:, :, 0] if squeeze else out

    ys = np.clip((np.arange(oh, dtype=np.float64) + 0.5) * (h / oh) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow, dtype=np.float64) + 0.5) * (w / ow) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)

    top = arr[y0][:, x0] * (1 - wx)[None, :, None] + arr[y0][:, x1] * wx[None, :, None]
    bot = arr[y1][:, x0] * (1 - wx)[None, :, None] + arr[y1][:, x1] * wx[None, :, None]
    out = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    return out[:, :, 0] if squeeze else out


def to_chw(img: np.ndarray) -> np.ndarray:
    """(h, w, 3) image to contiguous (3, h, w) float32, values as given."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3), got {arr.shape}")
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _as_hw(target) -> tuple[int, int]:
    if isinstance(target, int):
        return (target, target)
    h, w = target
    return (int(h), int(w))


def decode_resize(path: str, target=240) -> np.ndarray:
    """File to a network-ready (1, 3, h, w) float32 batch in [0, 255].

    ``target`` is a side length or an (h, w) pair.
    """
    hw = _as_hw(target)
    return to_chw(resize_bilinear(decode_image(path), hw))[None]


def load_arrays(
    index: DatasetIndex,
    sample_ids: Optional[np.ndarray] = None,
    target=240,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode a set of samples into one (n, 3, h, w) batch plus labels."""
    hw = _as_hw(target)
    ids = np.arange(len(index)) if sample_ids is None else np.asarray(sample_ids)
    if ids.size == 0:
        raise ValueError("no samples selected")
    x = np.empty((ids.size, 3, hw[0], hw[1]), dtype=np.float32)
    y = np.empty(ids.size, dtype=np.int64)
    for row, i in enumerate(ids):
        x[row] = decode_resize(os.path.join(index.root, index.paths[int(i)]), hw)[0]
        y[row] = index.labels[int(i)]
    return x, y


def synthetic_dataset(
    num_classes: int = 5,
    per_class: int = 40,
    hw: tuple[int, int] = (64, 64),
    seed: int = 0,
    noise: float = 24.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Procedural stand-in images, one sinusoidal texture family per class.

    Each class gets a distinct stripe orientation/frequency and channel
    emphasis, plus per-image phase jitter and pixel noise, so the task is
    learnable but not trivial.  Returns (n, 3, h, w) float32 in [0, 255]
    and int64 labels, shuffled.
    """
    if num_classes < 2 or per_class < 1:
        raise ValueError("need >= 2 classes and >= 1 sample per class")
    rng = np.random.default_rng(seed)
    h, w = hw
    v = np.arange(h, dtype=np.float32)[:, None]
    u = np.arange(w, dtype=np.float32)[None, :]
    xs = np.empty((num_classes * per_class, 3, h, w), dtype=np.float32)
    ys = np.empty(num_classes * per_class, dtype=np.int64)
    row = 0
    for c in range(num_classes):
        freq = 2.0 * (c + 1) / max(h, w)
        angle = np.pi * c / num_classes
        carrier = np.cos(angle) * v + np.sin(angle) * u
        for _ in range(per_class):
            phase = rng.uniform(0, 2 * np.pi)
            wave = 0.5 * (1.0 + np.sin(2 * np.pi * freq * carrier + phase))
            img = np.empty((3, h, w), dtype=np.float32)
            for ch in range(3):
                gain = 1.0 if ch == c % 3 else 0.35
                img[ch] = 255.0 * gain * wave
            img += rng.normal(0.0, noise, size=img.shape).astype(np.float32)
            xs[row] = np.clip(img, 0.0, 255.0)
            ys[row] = c
            row += 1
    order = rng.permutation(len(xs))
    return xs[order], ys[order]
