"""MNIST-family dataset handling: IDX parsing, normalization, hardness
bookkeeping, and stratified subsampling.

IDX layout (big endian): u32 magic (0x00000803 images / 0x00000801 labels),
u32 dimension extents, then raw unsigned bytes. Files may be gzip-wrapped;
wrapping is detected from the 0x1f 0x8b magic, not the filename.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ClassWithoutEasyExemplar,
    DataError,
    FormatError,
    RangeError,
    TruncationError,
)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DATASET_IDS = ("mnist", "fmnist", "kmnist")
NUM_CLASSES = 10

_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_idx_images(path) -> np.ndarray:
    """Raw (N, 1, H, W) uint8 image tensor from an IDX file."""
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise TruncationError(f"{path}: header shorter than 16 bytes")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: image magic 0x{magic:08x} != 0x{IMAGE_MAGIC:08x}")
    need = 16 + n * h * w
    if len(raw) < need:
        raise TruncationError(f"{path}: declares {need} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=16)
    return data.reshape(n, 1, h, w).copy()


def load_idx_labels(path) -> np.ndarray:
    """(N,) uint8 label vector; values must be < 10 for these datasets."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise TruncationError(f"{path}: header shorter than 8 bytes")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise FormatError(f"{path}: label magic 0x{magic:08x} != 0x{LABEL_MAGIC:08x}")
    if len(raw) < 8 + n:
        raise TruncationError(f"{path}: declares {8 + n} bytes, file has {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).copy()
    if labels.size and labels.max() >= NUM_CLASSES:
        raise RangeError(f"{path}: label {labels.max()} >= {NUM_CLASSES}")
    return labels


def write_idx_images(path, images_u8: np.ndarray, gzip_wrap=False):
    imgs = np.asarray(images_u8, dtype=np.uint8)
    n = imgs.shape[0]
    h, w = imgs.shape[-2], imgs.shape[-1]
    payload = struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + imgs.tobytes()
    _write(path, payload, gzip_wrap)


def write_idx_labels(path, labels: np.ndarray, gzip_wrap=False):
    lab = np.asarray(labels, dtype=np.uint8)
    payload = struct.pack(">II", LABEL_MAGIC, lab.shape[0]) + lab.tobytes()
    _write(path, payload, gzip_wrap)


def _write(path, payload, gzip_wrap):
    if gzip_wrap:
        # fixed mtime so identical payloads produce identical files
        with open(path, "wb") as fh:
            with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        Path(path).write_bytes(payload)


@dataclass
class ImageSet:
    """Normalized images in [0,1] plus labels for one dataset split."""

    images: np.ndarray          # (N, 1, 28, 28) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64, values in [0, 10)
    dataset_id: str = ""
    split: str = ""

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels")

    def __len__(self):
        return self.images.shape[0]

    def take(self, indices, split_suffix="") -> "ImageSet":
        idx = np.asarray(indices)
        return ImageSet(self.images[idx], self.labels[idx],
                        self.dataset_id, self.split + split_suffix)


def normalize(raw_u8: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in [0,1], exactly pixel/255."""
    return np.asarray(raw_u8, dtype=np.float32) / np.float32(255.0)


def denormalize(images: np.ndarray) -> np.ndarray:
    """Inverse of normalize, rounding to the nearest byte."""
    return np.clip(np.floor(images * 255.0 + 0.5), 0, 255).astype(np.uint8)


def load_image_set(data_root, dataset_id: str, split: str) -> ImageSet:
    """Load one split of mnist / fmnist / kmnist from a data-root directory.

    Expects <root>/<dataset>/<standard idx file name>[.gz].
    """
    if dataset_id not in DATASET_IDS:
        raise DataError(f"unknown dataset id {dataset_id!r}, expected one of {DATASET_IDS}")
    if split not in _SPLIT_FILES:
        raise DataError(f"unknown split {split!r}")
    base = Path(data_root) / dataset_id
    img_name, lbl_name = _SPLIT_FILES[split]
    img_path = _find(base, img_name)
    lbl_path = _find(base, lbl_name)
    images = normalize(load_idx_images(img_path))
    labels = load_idx_labels(lbl_path).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{dataset_id}/{split}: image/label count mismatch")
    return ImageSet(images, labels, dataset_id, split)


def _find(base: Path, stem: str) -> Path:
    for cand in (base / stem, base / (stem + ".gz")):
        if cand.exists():
            return cand
    raise DataError(f"missing dataset file {base / stem}[.gz]")


@dataclass
class HardnessLabels:
    """Per-image easy/hard flags plus the policy that produced them."""

    easy: np.ndarray            # (N,) bool
    threshold: float
    checkpoint_id: str = ""

    def __len__(self):
        return self.easy.shape[0]

    @property
    def hard(self) -> np.ndarray:
        return ~self.easy

    @property
    def easy_fraction(self) -> float:
        return float(self.easy.mean()) if len(self) else float("nan")


@dataclass
class ClassIndex:
    """For each class, the indices of its easy images."""

    by_class: list = field(default_factory=list)   # list of int arrays, one per class

    def pool(self, cls: int) -> np.ndarray:
        return self.by_class[cls]


def build_class_index(imageset: ImageSet, labels: HardnessLabels) -> ClassIndex:
    if len(labels) != len(imageset):
        raise FormatError("hardness labels do not match the image set")
    pools = []
    empty = []
    for cls in range(NUM_CLASSES):
        idx = np.flatnonzero((imageset.labels == cls) & labels.easy)
        pools.append(idx)
        if idx.size == 0:
            empty.append(cls)
    if empty:
        raise ClassWithoutEasyExemplar(empty)
    return ClassIndex(pools)


def stratified_subset(imageset: ImageSet, labels: HardnessLabels, ratio: float,
                      seed: int = 0):
    """Subset of round(ratio*N) images whose hard count stays within one image
    of ratio * (total hard). Deterministic under seed; ratio 1.0 returns the
    full set in original order.

    Returns (subset, indices-into-the-original-set).
    """
    if not 0 < ratio <= 1:
        raise RangeError(f"subset ratio {ratio} outside (0, 1]")
    n = len(imageset)
    if len(labels) != n:
        raise FormatError("hardness labels do not match the image set")
    if ratio == 1.0:
        idx = np.arange(n)
        return imageset.take(idx), idx
    want = int(round(ratio * n))
    hard_idx = np.flatnonzero(labels.hard)
    easy_idx = np.flatnonzero(labels.easy)
    want_hard = min(int(round(ratio * hard_idx.size)), want)
    want_easy = want - want_hard
    rng = np.random.default_rng(seed)
    pick_hard = rng.choice(hard_idx, size=want_hard, replace=False) if want_hard else np.empty(0, dtype=np.int64)
    pick_easy = rng.choice(easy_idx, size=want_easy, replace=False) if want_easy else np.empty(0, dtype=np.int64)
    idx = np.sort(np.concatenate([pick_hard, pick_easy]).astype(np.int64))
    return imageset.take(idx, split_suffix=f"@{ratio:g}"), idx
