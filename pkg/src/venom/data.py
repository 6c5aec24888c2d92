"""Synthetic 16×16 grayscale shape dataset with jitter, plus binary persistence.

Six shape classes (disk, ring, cross, hbars, vbars, checker) rendered onto a
[−1, 1] canvas with randomized center offset, size and pixel noise.  Every
sample's RNG stream is keyed by (seed, split, index), so generation is a pure
function of (seed, per_class) and is parallelizable per sample.

File format (little-endian throughout): magic "VNMD", u32 version=1, u32 n,
u16 h=16, u16 w=16, u16 classes=6, u64 seed, then n labels as u16, then
n·256 pixels as 32-bit IEEE-754 floats in [−1, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolationError, FormatError

IMG_H = 16
IMG_W = 16
N_CLASSES = 6

_MAGIC = b"VNMD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIHHHQ")  # magic, version, n, h, w, classes, seed

# domain-separation tag so renderer streams never collide with other consumers
_RENDER_TAG = 0x52454E44  # "REND"
_SPLIT_TRAIN = 0
_SPLIT_TEST = 1


@dataclass(frozen=True)
class ShapeClass:
    id: int
    name: str


SHAPE_CLASSES: tuple[ShapeClass, ...] = (
    ShapeClass(0, "disk"),
    ShapeClass(1, "ring"),
    ShapeClass(2, "cross"),
    ShapeClass(3, "hbars"),
    ShapeClass(4, "vbars"),
    ShapeClass(5, "checker"),
)

CLASS_NAMES = tuple(c.name for c in SHAPE_CLASSES)


def class_by_id(class_id: int) -> ShapeClass:
    if not 0 <= class_id < N_CLASSES:
        raise ContractViolationError(f"class id {class_id} outside 0..{N_CLASSES - 1}")
    return SHAPE_CLASSES[class_id]


@dataclass
class Dataset:
    images: np.ndarray  # [n, 16, 16] float64, values on the float32 grid in [-1, 1]
    labels: np.ndarray  # [n] int64 in 0..5
    split: str  # "train" | "test"
    seed: int

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.split == other.split
            and self.seed == other.seed
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )


def render_sample(shape: ShapeClass, jitter_seed) -> np.ndarray:
    """Render one 16×16 sample of ``shape``, deterministic in (shape, jitter_seed).

    Center offset is uniform in [−2, +2] px per axis, size jitter ±20%,
    additive Gaussian pixel noise σ=0.1, output clipped to [−1, 1] and
    quantized to the float32 grid so disk round-trips are bit-exact.
    """
    key = [jitter_seed] if isinstance(jitter_seed, (int, np.integer)) else list(jitter_seed)
    rng = np.random.default_rng(np.random.SeedSequence([_RENDER_TAG, shape.id, *key]))

    dr = rng.uniform(-2.0, 2.0)
    dc = rng.uniform(-2.0, 2.0)
    scale = rng.uniform(0.8, 1.2)

    rows = np.arange(IMG_H, dtype=np.float64)[:, None]
    cols = np.arange(IMG_W, dtype=np.float64)[None, :]
    cy, cx = 7.5 + dr, 7.5 + dc

    if shape.name == "disk":
        mask = (rows - cy) ** 2 + (cols - cx) ** 2 <= (5.0 * scale) ** 2
    elif shape.name == "ring":
        d2 = (rows - cy) ** 2 + (cols - cx) ** 2
        # the hole shrinks faster than the outline: small-scale rings rasterize
        # with sub-pixel holes and become genuine disk lookalikes, the
        # dataset's deliberate hard cases
        r_in = 0.3 + 6.5 * (scale - 0.8)
        mask = (r_in**2 <= d2) & (d2 <= (6.0 * scale) ** 2)
    elif shape.name == "cross":
        ar = np.abs(rows - cy) + 0.0 * cols
        ac = np.abs(cols - cx) + 0.0 * rows
        arm_w, arm_l = 1.5 * scale, 6.5 * scale
        mask = ((ar <= arm_w) & (ac <= arm_l)) | ((ac <= arm_w) & (ar <= arm_l))
    elif shape.name == "hbars":
        period = 8.0 * scale
        mask = ((rows - dr) % period < period / 2.0) & (cols >= -1)
    elif shape.name == "vbars":
        period = 8.0 * scale
        mask = ((cols - dc) % period < period / 2.0) & (rows >= -1)
    elif shape.name == "checker":
        cell = 8.0 * scale
        parity = np.floor((rows - dr) / cell) + np.floor((cols - dc) / cell)
        mask = (parity % 2.0) == 0.0
    else:  # pragma: no cover - SHAPE_CLASSES is closed
        raise ContractViolationError(f"unknown shape {shape.name!r}")

    img = np.where(mask, 1.0, -1.0)
    img = img + rng.normal(0.0, 0.1, size=(IMG_H, IMG_W))
    img = np.clip(img, -1.0, 1.0)
    # quantize to the storage grid so in-memory data equals its persisted form
    return img.astype(np.float32).astype(np.float64)


def _make_split(seed: int, split_code: int, split_name: str, n: int) -> Dataset:
    images = np.empty((n, IMG_H, IMG_W), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = SHAPE_CLASSES[i % N_CLASSES]
        images[i] = render_sample(cls, (seed, split_code, i))
        labels[i] = cls.id
    return Dataset(images=images, labels=labels, split=split_name, seed=seed)


def generate_dataset(seed: int, per_class: int) -> tuple[Dataset, Dataset]:
    """Build class-balanced train/test splits with disjoint per-sample streams.

    Train has 6·per_class samples, test 6·⌈per_class/5⌉.  Generation also
    verifies, by exhaustive hashing, that no image appears in both splits.
    """
    if per_class < 1:
        raise ContractViolationError("per_class must be >= 1")
    train = _make_split(seed, _SPLIT_TRAIN, "train", N_CLASSES * per_class)
    test = _make_split(seed, _SPLIT_TEST, "test", N_CLASSES * ((per_class + 4) // 5))

    train_hashes = {img.tobytes() for img in train.images}
    for j, img in enumerate(test.images):
        if img.tobytes() in train_hashes:
            raise ContractViolationError(f"test sample {j} duplicates a train sample")
    return train, test


def save_dataset(ds: Dataset, path) -> None:
    if ds.images.shape != (ds.n, IMG_H, IMG_W):
        raise ContractViolationError(f"dataset images shape {ds.images.shape} inconsistent with n={ds.n}")
    if ds.n and (ds.labels.min() < 0 or ds.labels.max() >= N_CLASSES):
        raise ContractViolationError("dataset labels outside 0..5")
    header = _HEADER.pack(_MAGIC, _VERSION, ds.n, IMG_H, IMG_W, N_CLASSES, ds.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.labels.astype("<u2").tobytes())
        fh.write(ds.images.astype("<f4").tobytes())


def load_dataset(path, split: str = "train") -> Dataset:
    """Read a dataset file; malformed input raises a format error naming the offset."""
    with open(path, "rb") as fh:
        blob = fh.read()

    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} bytes", offset=len(blob))
    magic, version, n, h, w, classes, seed = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if h != IMG_H:
        raise FormatError(f"height {h} != {IMG_H}", offset=12)
    if w != IMG_W:
        raise FormatError(f"width {w} != {IMG_W}", offset=14)
    if classes != N_CLASSES:
        raise FormatError(f"class count {classes} != {N_CLASSES}", offset=16)

    labels_off = _HEADER.size
    pixels_off = labels_off + 2 * n
    expected = pixels_off + 4 * n * IMG_H * IMG_W
    if len(blob) < expected:
        raise FormatError(f"truncated body: {len(blob)} of {expected} bytes", offset=len(blob))
    if len(blob) > expected:
        raise FormatError(f"trailing data: {len(blob) - expected} extra bytes", offset=expected)

    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=labels_off).astype(np.int64)
    if n and labels.max() >= N_CLASSES:
        bad = int(np.argmax(labels >= N_CLASSES))
        raise FormatError(f"label {labels[bad]} out of range at sample {bad}", offset=labels_off + 2 * bad)
    pixels = np.frombuffer(blob, dtype="<f4", count=n * IMG_H * IMG_W, offset=pixels_off)
    if pixels.size and (np.abs(pixels) > 1.0).any():
        bad = int(np.argmax(np.abs(pixels) > 1.0))
        raise FormatError(f"pixel {pixels[bad]} outside [-1, 1] at index {bad}", offset=pixels_off + 4 * bad)

    images = pixels.astype(np.float64).reshape(n, IMG_H, IMG_W)
    return Dataset(images=images, labels=labels, split=split, seed=seed)


def class_centroids(ds: Dataset) -> np.ndarray:
    """Per-class mean image, [6, 16, 16]."""
    out = np.zeros((N_CLASSES, IMG_H, IMG_W))
    for c in range(N_CLASSES):
        out[c] = ds.images[ds.labels == c].mean(axis=0)
    return out


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Classifier-free separability oracle: L2 nearest centroid on raw pixels."""
    cents = class_centroids(train).reshape(N_CLASSES, -1)
    flat = test.images.reshape(test.n, -1)
    d2 = ((flat[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    pred = d2.argmin(axis=1)
    return float((pred == test.labels).mean())
