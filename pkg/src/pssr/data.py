"""Dataset ingestion: canonical MNIST/CIFAR binary layouts, batching, caching.

Images are loaded as float32 in [0, 1] with no further normalization, so
attack budgets stated in raw pixel units keep their meaning; any
normalization belongs inside the model.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CANONICAL_SPLIT_SIZES = {
    ("mnist", "train"): 60000,
    ("mnist", "test"): 10000,
    ("cifar10", "train"): 50000,
    ("cifar10", "test"): 10000,
    ("cifar100", "train"): 50000,
    ("cifar100", "test"): 10000,
}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

DEFAULT_BATCH_SIZE = 128


class IngestionError(RuntimeError):
    """Raised when a raw dataset file is missing or structurally corrupt."""


class DataValidationError(ValueError):
    """Raised when loaded data violates a batch invariant (labels, range, shape)."""


@dataclass(frozen=True)
class DatasetSource:
    """Where a split of a known dataset lives on disk."""

    name: str  # mnist | cifar10 | cifar100
    root_path: Path
    split: str  # train | test

    def __post_init__(self):
        if self.name not in ("mnist", "cifar10", "cifar100"):
            raise DataValidationError(f"unknown dataset name: {self.name!r}")
        if self.split not in ("train", "test"):
            raise DataValidationError(f"unknown split: {self.split!r}")
        object.__setattr__(self, "root_path", Path(self.root_path))

    @property
    def num_classes(self) -> int:
        return 100 if self.name == "cifar100" else 10

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (1, 28, 28) if self.name == "mnist" else (3, 32, 32)


@dataclass
class ImageBatch:
    """A batch of images in [0, 1] with integer class labels."""

    images: torch.Tensor  # float32 [N, C, H, W]
    labels: torch.Tensor  # int64 [N]

    def __post_init__(self):
        self.images = torch.as_tensor(self.images, dtype=torch.float32)
        self.labels = torch.as_tensor(self.labels, dtype=torch.int64)
        if self.images.ndim != 4:
            raise DataValidationError(f"images must be [N,C,H,W], got {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise DataValidationError(
                f"labels shape {tuple(self.labels.shape)} does not match N={self.images.shape[0]}"
            )
        if self.images.shape[0] < 1:
            raise DataValidationError("batch must contain at least one sample")
        if not torch.isfinite(self.images).all():
            raise DataValidationError("images contain NaN/Inf")
        lo, hi = self.images.min().item(), self.images.max().item()
        if lo < 0.0 or hi > 1.0:
            raise DataValidationError(f"pixel values outside [0,1]: min={lo}, max={hi}")

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_idx_images(path: Path) -> np.ndarray:
    if not path.exists():
        raise IngestionError(f"missing dataset file: {path}")
    raw = path.read_bytes()
    if len(raw) < 16:
        raise IngestionError(f"truncated IDX image file: {path}")
    magic, count, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IngestionError(f"bad IDX image magic {magic:#010x} in {path}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise IngestionError(f"corrupt IDX image file {path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return data.reshape(count, 1, rows, cols)


def _read_idx_labels(path: Path) -> np.ndarray:
    if not path.exists():
        raise IngestionError(f"missing dataset file: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise IngestionError(f"truncated IDX label file: {path}")
    magic, count = struct.unpack(">ii", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise IngestionError(f"bad IDX label magic {magic:#010x} in {path}")
    if len(raw) != 8 + count:
        raise IngestionError(f"corrupt IDX label file {path}: expected {8 + count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def _read_cifar_records(path: Path, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Parse record-oriented CIFAR binaries.

    cifar10 records are 1 label byte + 3072 pixel bytes; cifar100 records
    carry a coarse and a fine label byte, and the fine label is kept.
    """
    if not path.exists():
        raise IngestionError(f"missing dataset file: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    label_bytes = 2 if num_classes == 100 else 1
    record = label_bytes + 3 * 32 * 32
    if raw.size == 0 or raw.size % record != 0:
        raise IngestionError(f"corrupt CIFAR file {path}: size {raw.size} not a multiple of {record}")
    records = raw.reshape(-1, record)
    labels = records[:, label_bytes - 1]
    images = records[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def _load_raw(source: DatasetSource) -> tuple[np.ndarray, np.ndarray]:
    root = source.root_path
    if source.name == "mnist":
        image_file, label_file = MNIST_FILES[source.split]
        images = _read_idx_images(root / image_file)
        labels = _read_idx_labels(root / label_file)
        if images.shape[0] != labels.shape[0]:
            raise IngestionError(
                f"image/label count mismatch in {root}: {images.shape[0]} vs {labels.shape[0]}"
            )
        return images, labels

    if source.name == "cifar10":
        files = [f"data_batch_{i}.bin" for i in range(1, 6)] if source.split == "train" else ["test_batch.bin"]
    else:
        files = ["train.bin"] if source.split == "train" else ["test.bin"]
    parts = [_read_cifar_records(root / f, source.num_classes) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return images, labels


def load_arrays(source: DatasetSource) -> tuple[torch.Tensor, torch.Tensor]:
    """Load a full split as (images in [0,1], labels), validating labels and counts."""
    images_u8, labels_u8 = _load_raw(source)
    labels = torch.from_numpy(labels_u8.astype(np.int64))
    if labels.numel() and (labels.min() < 0 or labels.max() >= source.num_classes):
        raise DataValidationError(
            f"label out of range [0, {source.num_classes}) in {source.name}/{source.split}"
        )
    canonical = CANONICAL_SPLIT_SIZES[(source.name, source.split)]
    if images_u8.shape[0] != canonical:
        warnings.warn(
            f"{source.name}/{source.split} has {images_u8.shape[0]} samples "
            f"(canonical: {canonical})",
            stacklevel=2,
        )
    images = torch.from_numpy(images_u8.astype(np.float32) / 255.0)
    return images, labels


def to_batches(images: torch.Tensor, labels: torch.Tensor, batch_size: int = DEFAULT_BATCH_SIZE,
               seed: int | None = None) -> list[ImageBatch]:
    """Split arrays into batches; a seed shuffles deterministically, None keeps file order."""
    n = images.shape[0]
    if seed is not None:
        g = torch.Generator().manual_seed(seed)
        order = torch.randperm(n, generator=g)
        images, labels = images[order], labels[order]
    return [
        ImageBatch(images[i : i + batch_size], labels[i : i + batch_size])
        for i in range(0, n, batch_size)
    ]


def load_dataset(source: DatasetSource, batch_size: int = DEFAULT_BATCH_SIZE,
                 seed: int | None = None) -> list[ImageBatch]:
    """Load a split once, scaled to [0,1], in a deterministic batch order."""
    images, labels = load_arrays(source)
    return to_batches(images, labels, batch_size=batch_size, seed=seed)


def take_subset(source: DatasetSource, k: int, seed: int = 0,
                batch_size: int = DEFAULT_BATCH_SIZE) -> list[ImageBatch]:
    """Class-stratified subset of size k, deterministic under seed.

    Classes get k // num_classes samples each; any remainder is spread over
    the lowest class indices, so k divisible by the class count gives exact
    per-class parity.
    """
    images, labels = load_arrays(source)
    return to_batches(*stratified_indices_select(images, labels, k, source.num_classes, seed),
                      batch_size=batch_size)


def stratified_indices_select(images: torch.Tensor, labels: torch.Tensor, k: int,
                              num_classes: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    n = images.shape[0]
    if k > n:
        raise DataValidationError(f"requested subset k={k} exceeds split size {n}")
    base, extra = divmod(k, num_classes)
    g = torch.Generator().manual_seed(seed)
    picked = []
    for c in range(num_classes):
        pool = torch.nonzero(labels == c, as_tuple=False).flatten()
        want = base + (1 if c < extra else 0)
        if want > pool.numel():
            raise DataValidationError(
                f"class {c} has only {pool.numel()} samples, need {want} for stratified subset"
            )
        perm = torch.randperm(pool.numel(), generator=g)[:want]
        picked.append(pool[perm])
    idx = torch.sort(torch.cat(picked)).values
    return images[idx], labels[idx]


# ---------------------------------------------------------------------------
# Processed-split cache: shape header + raw payload, JSON provenance sidecar.
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"PSSRDAT1"


def save_cache(path: Path, images: torch.Tensor, labels: torch.Tensor,
               provenance: dict | None = None) -> None:
    """Persist a processed split; reload is bit-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.ascontiguousarray(images.numpy(), dtype=np.float32)
    lab = np.ascontiguousarray(labels.numpy(), dtype=np.int64)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack(">i", img.ndim))
        f.write(struct.pack(f">{img.ndim}i", *img.shape))
        f.write(img.tobytes())
        f.write(lab.tobytes())
    sidecar = dict(provenance or {})
    sidecar["sha256"] = hashlib.sha256(path.read_bytes()).hexdigest()
    sidecar["shape"] = list(img.shape)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_cache(path: Path) -> tuple[torch.Tensor, torch.Tensor]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing cache file: {path}")
    raw = path.read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise IngestionError(f"bad cache magic in {path}")
    ndim = struct.unpack(">i", raw[8:12])[0]
    shape = struct.unpack(f">{ndim}i", raw[12 : 12 + 4 * ndim])
    offset = 12 + 4 * ndim
    count = int(np.prod(shape))
    images = np.frombuffer(raw, dtype=np.float32, count=count, offset=offset).reshape(shape)
    labels = np.frombuffer(raw, dtype=np.int64, offset=offset + 4 * count)
    if labels.shape[0] != shape[0]:
        raise IngestionError(f"corrupt cache file {path}: {labels.shape[0]} labels for {shape[0]} images")
    return torch.from_numpy(images.copy()), torch.from_numpy(labels.copy())


def flatten_batches(batches: list[ImageBatch]) -> ImageBatch:
    """Concatenate a batch list back into one batch."""
    return ImageBatch(
        torch.cat([b.images for b in batches]),
        torch.cat([b.labels for b in batches]),
    )
