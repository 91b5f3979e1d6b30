"""Dataset loading, batching, and a synthetic position-sensitive task.

Binary image records are fixed width: one label byte (two for the
100-class variant, coarse then fine) followed by 3072 pixel bytes in
channel-planar R, G, B order, each plane row-major. The synthetic dataset
reuses the same record layout plus a JSON sidecar describing the classes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .rng import make_rng

IMAGE_SIDE = 32
PLANE = IMAGE_SIDE * IMAGE_SIDE
RECORD_PIXELS = 3 * PLANE


@dataclass
class Dataset:
    images: np.ndarray  # (n, 32, 32, 3) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str
    name: str
    num_classes: int

    def __len__(self):
        return self.images.shape[0]


def _decode_records(raw: bytes, label_bytes: int, path: str) -> tuple[np.ndarray, np.ndarray]:
    rec = label_bytes + RECORD_PIXELS
    if len(raw) == 0 or len(raw) % rec != 0:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of the "
                         f"{rec}-byte record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)  # fine label is the last byte
    planes = arr[:, label_bytes:].reshape(-1, 3, IMAGE_SIDE, IMAGE_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return images, labels


_CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "eval"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "eval"): ["test.bin"],
}


def load_cifar_binary(path: str, variant: str = "cifar10",
                      split: str = "train") -> Dataset:
    """Load the binary distribution from ``path`` (a directory or one file)."""
    if variant not in ("cifar10", "cifar100"):
        raise ValueError(f"variant must be cifar10 or cifar100, got {variant!r}")
    if split not in ("train", "eval"):
        raise ValueError(f"split must be train or eval, got {split!r}")
    label_bytes = 1 if variant == "cifar10" else 2
    num_classes = 10 if variant == "cifar10" else 100
    if os.path.isfile(path):
        files = [path]
    else:
        names = _CIFAR_FILES[(variant, split)]
        files = [os.path.join(path, n) for n in names]
        if not os.path.exists(files[0]):
            # tolerate the archive's own subdirectory name
            sub = "cifar-10-batches-bin" if variant == "cifar10" else "cifar-100-binary"
            nested = [os.path.join(path, sub, n) for n in names]
            if os.path.exists(nested[0]):
                files = nested
    images, labels = [], []
    for f in files:
        if not os.path.exists(f):
            raise FileNotFoundError(f"dataset file missing: {f}")
        with open(f, "rb") as fh:
            im, lb = _decode_records(fh.read(), label_bytes, f)
        images.append(im)
        labels.append(lb)
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for {variant}")
    return Dataset(images, labels, split, variant, num_classes)


# -- synthetic positional task --------------------------------------------

# class -> (dy, dx) offset between two identical motifs in units of the
# motif cell; the pair (direction, distance) is the only class signal
_OFFSET_CELLS = [
    (0, 2), (0, 4),    # east, near / far
    (2, 0), (4, 0),    # south
    (2, 2), (4, 4),    # southeast
    (-2, 2), (-4, 4),  # northeast
]

CLASS_NAMES = [
    "east-near", "east-far", "south-near", "south-far",
    "southeast-near", "southeast-far", "northeast-near", "northeast-far",
]


def _motif(cell: int) -> np.ndarray:
    """Fixed gray X texture filling one cell; identical in every image."""
    tex = np.full((cell, cell, 3), 0.6, dtype=np.float64)
    idx = np.arange(cell)
    tex[idx, idx] = 1.0
    tex[idx, cell - 1 - idx] = 1.0
    return tex


def synthesize_positional(n: int, grid=None, num_classes: int = 8,
                          seed: int = 0, split: str = "train") -> Dataset:
    """Images whose class is the spatial relation between two identical motifs.

    Each image holds two copies of one fixed gray texture on a black
    background at cell-aligned spots; the offset between the copies
    (direction and distance) determines the label. The motif never varies
    and the anchor flips between the two far corners of its valid range,
    so every patch in isolation is class-free: only the relative position
    of the pair separates the classes, and a model with no position
    information sees the same bag of patches in every image. Pixels are
    byte-quantized so a record-format round trip is bitwise exact. Labels
    run round-robin.
    """
    if not (1 <= num_classes <= len(_OFFSET_CELLS)):
        raise ValueError(f"num_classes must be in [1, {len(_OFFSET_CELLS)}], got {num_classes}")
    cells = grid.w if grid is not None else 8
    cell = IMAGE_SIDE // cells
    if cells < 5:
        raise ValueError(f"grid side {cells} too small for the far offsets")
    rng = make_rng(seed, stream=17)
    motif = _motif(cell)
    images = np.zeros((n, IMAGE_SIDE, IMAGE_SIDE, 3), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        cls = i % num_classes
        cy, cx = _OFFSET_CELLS[cls]
        dy, dx = cy * cell, cx * cell
        # anchor cells where both motifs stay in bounds; one coin flip picks
        # the near or far corner of that range (a handful of layouts per
        # class keeps the task crackable inside a short training budget)
        y_lo = max(0, -cy)
        y_hi = cells - max(0, cy)
        x_lo = max(0, -cx)
        x_hi = cells - max(0, cx)
        far = int(rng.integers(0, 2))
        ay = (y_hi - 1 if far else y_lo) * cell
        ax = (x_hi - 1 if far else x_lo) * cell
        img = np.zeros((IMAGE_SIDE, IMAGE_SIDE, 3), dtype=np.float64)
        img[ay:ay + cell, ax:ax + cell] = motif
        img[ay + dy:ay + dy + cell, ax + dx:ax + dx + cell] = motif
        images[i] = np.round(img * 255.0) / 255.0
        labels[i] = cls
    return Dataset(images, labels, split, "synthetic-positional", num_classes)


def save_dataset_binary(ds: Dataset, stem: str) -> None:
    """Write ``stem``.bin in the 1-label-byte record layout plus a JSON
    sidecar ``stem``.meta.json naming the classes."""
    if ds.num_classes > 256:
        raise ValueError("record layout holds one label byte")
    pixels = np.round(ds.images * 255.0).astype(np.uint8)
    planes = pixels.transpose(0, 3, 1, 2).reshape(len(ds), RECORD_PIXELS)
    records = np.concatenate([ds.labels.astype(np.uint8)[:, None], planes], axis=1)
    with open(stem + ".bin", "wb") as fh:
        fh.write(records.tobytes())
    meta = {
        "name": ds.name,
        "split": ds.split,
        "num_classes": ds.num_classes,
        "count": len(ds),
        "classes": CLASS_NAMES[:ds.num_classes] if ds.name == "synthetic-positional" else None,
    }
    with open(stem + ".meta.json", "w", encoding="ascii") as fh:
        json.dump(meta, fh, indent=2)


def load_dataset_binary(stem: str, split: str = "train") -> Dataset:
    with open(stem + ".meta.json", "r", encoding="ascii") as fh:
        meta = json.load(fh)
    with open(stem + ".bin", "rb") as fh:
        images, labels = _decode_records(fh.read(), 1, stem + ".bin")
    return Dataset(images, labels, meta.get("split", split), meta["name"],
                   meta["num_classes"])


def mean_pixel_probe_accuracy(train: Dataset, test: Dataset) -> float:
    """Least-squares linear probe on per-image channel means; near-chance
    accuracy certifies that color carries no class signal."""
    def feats(ds):
        f = ds.images.reshape(len(ds), -1, 3).mean(axis=1)
        return np.concatenate([f, np.ones((len(ds), 1), dtype=f.dtype)], axis=1)

    xs, xt = feats(train).astype(np.float64), feats(test).astype(np.float64)
    onehot = np.eye(train.num_classes)[train.labels]
    w, *_ = np.linalg.lstsq(xs, onehot, rcond=None)
    pred = np.argmax(xt @ w, axis=1)
    return float((pred == test.labels).mean())


# -- normalization and augmentation ---------------------------------------


def compute_channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 1, 2), dtype=np.float64)
    std = images.std(axis=(0, 1, 2), dtype=np.float64)
    return mean, np.maximum(std, 1e-8)


def save_stats_sidecar(path: str, mean: np.ndarray, std: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("mean " + " ".join(repr(float(v)) for v in mean) + "\n")
        fh.write("std " + " ".join(repr(float(v)) for v in std) + "\n")


def load_stats_sidecar(path: str) -> tuple[np.ndarray, np.ndarray]:
    vals = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            key, *nums = line.split()
            vals[key] = np.array([float(v) for v in nums], dtype=np.float64)
    return vals["mean"], vals["std"]


def channel_stats_for(ds: Dataset, cache_dir: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Train-split statistics, cached beside the data when a dir is given."""
    if cache_dir is not None:
        path = os.path.join(cache_dir, f"{ds.name}.stats.txt")
        if os.path.exists(path):
            return load_stats_sidecar(path)
        mean, std = compute_channel_stats(ds.images)
        save_stats_sidecar(path, mean, std)
        return mean, std
    return compute_channel_stats(ds.images)


def normalize_augment(batch: np.ndarray, train: bool, mean: np.ndarray,
                      std: np.ndarray, augment: bool = False,
                      rng: np.random.Generator | None = None,
                      force_flip: bool = False) -> np.ndarray:
    """Channel standardization, plus seeded pad-4 random crop and horizontal
    flip when augmenting a training batch."""
    out = batch.astype(np.float32, copy=True)
    if train and (augment or force_flip):
        b, h, w, _ = out.shape
        if augment:
            if rng is None:
                raise ValueError("augmentation needs an rng")
            pad = 4
            padded = np.zeros((b, h + 2 * pad, w + 2 * pad, 3), dtype=out.dtype)
            padded[:, pad:pad + h, pad:pad + w] = out
            for i in range(b):
                oy, ox = rng.integers(0, 2 * pad + 1, size=2)
                out[i] = padded[i, oy:oy + h, ox:ox + w]
        for i in range(b):
            flip = force_flip or (augment and rng.random() < 0.5)
            if flip:
                out[i] = out[i, :, ::-1]
    out -= mean.astype(np.float32)
    out /= std.astype(np.float32)
    return out


class BatchIterator:
    """Epoch-wise batches; each pass visits every sample exactly once.

    With shuffling on, each epoch applies a fresh permutation seeded by
    (seed, epoch); off, samples come in file order.
    """

    def __init__(self, dataset: Dataset, batch_size: int = 128,
                 shuffle: bool = True, seed: int = 0, drop_last: bool = False):
        self.dataset = dataset
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed
        self.drop_last = drop_last
        self.epoch = 0

    def __iter__(self):
        n = len(self.dataset)
        order = np.arange(n)
        if self.shuffle:
            order = make_rng(self.seed, stream=1000 + self.epoch).permutation(n)
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            if self.drop_last and idx.size < self.batch_size:
                break
            yield self.dataset.images[idx], self.dataset.labels[idx]
        self.epoch += 1

    def __len__(self):
        n = len(self.dataset)
        return n // self.batch_size if self.drop_last else (n + self.batch_size - 1) // self.batch_size
