"""Datasets: CIFAR-10 binaries, the MIMD raw format, synthetic benchmarks and batching."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .errors import ConfigError, DataError, FormatError, TruncationError
from .tensor import Tensor

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
RAW_MAGIC = b"MIMD"
_RAW_HEADER = struct.Struct("<4sBIIII")


@dataclass(frozen=True)
class Dataset:
    """Images in [0, 1] as an [N x C x H x W] float64 array, optional integer labels."""

    images: np.ndarray
    labels: Optional[np.ndarray]
    name: str

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx: np.ndarray, name: Optional[str] = None) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, name or self.name)


def validate_dataset(ds: Dataset, num_classes: Optional[int] = None) -> Dataset:
    """Raise :class:`DataError` unless ``ds`` satisfies the dataset invariants."""
    x = ds.images
    if x.ndim != 4:
        raise DataError(f"{ds.name}: images must be N x C x H x W, got shape {x.shape}")
    if x.dtype != np.float64:
        raise DataError(f"{ds.name}: images must be float64, got {x.dtype}")
    if x.size and (not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0):
        raise DataError(f"{ds.name}: pixel values must lie in [0, 1]")
    if ds.labels is not None:
        y = ds.labels
        if y.shape != (x.shape[0],):
            raise DataError(f"{ds.name}: {y.shape[0] if y.ndim else 0} labels for {x.shape[0]} images")
        if not np.issubdtype(y.dtype, np.integer):
            raise DataError(f"{ds.name}: labels must be integers")
        if y.size and y.min() < 0:
            raise DataError(f"{ds.name}: negative label")
        if num_classes is not None and y.size and y.max() >= num_classes:
            raise DataError(f"{ds.name}: label {int(y.max())} outside [0, {num_classes})")
    return ds


# ---------------------------------------------------------------------------
# CIFAR-10 binary layout


def decode_cifar10(buf: bytes, name: str = "cifar10") -> Dataset:
    """Decode concatenated 3073-byte records (label byte + R, G, B planes)."""
    if len(buf) % CIFAR_RECORD:
        raise FormatError(
            f"{name}: length {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record size"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{name}: record {bad} has label byte {labels[bad]} > 9")
    images = raw[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0
    return Dataset(images, labels, name)


def encode_cifar10(ds: Dataset) -> bytes:
    """Inverse of :func:`decode_cifar10`; pixels are rounded to the nearest byte."""
    if ds.labels is None or ds.sample_shape != CIFAR_SHAPE:
        raise DataError("CIFAR-10 records need labels and 3 x 32 x 32 images")
    pixels = np.rint(ds.images * 255.0).astype(np.uint8).reshape(len(ds), -1)
    out = np.empty((len(ds), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = ds.labels.astype(np.uint8)
    out[:, 1:] = pixels
    return out.tobytes()


def load_cifar10(dir_path: Union[str, Path], expect_full: bool = True) -> tuple[Dataset, Dataset]:
    """Load ``data_batch_1..5.bin`` and ``test_batch.bin`` from ``dir_path``."""
    root = Path(dir_path)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)]
    missing = [n for n in names + ["test_batch.bin"] if not (root / n).is_file()]
    if missing:
        raise DataError(f"{root}: missing CIFAR-10 files {missing}")
    parts = [decode_cifar10((root / n).read_bytes(), n) for n in names]
    train = Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        "cifar10-train",
    )
    test = decode_cifar10((root / "test_batch.bin").read_bytes(), "cifar10-test")
    if expect_full and (len(train), len(test)) != (50000, 10000):
        raise FormatError(f"expected 50000/10000 CIFAR-10 records, found {len(train)}/{len(test)}")
    return train, test


# ---------------------------------------------------------------------------
# MIMD raw dataset format


def dump_raw_dataset(ds: Dataset) -> bytes:
    validate_dataset(ds)
    n, c, h, w = ds.images.shape
    has_labels = ds.labels is not None
    parts = [_RAW_HEADER.pack(RAW_MAGIC, int(has_labels), n, c, h, w)]
    parts.append(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
    if has_labels:
        parts.append(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    return b"".join(parts)


def parse_raw_dataset(buf: bytes, name: str = "raw") -> Dataset:
    if len(buf) < _RAW_HEADER.size:
        raise TruncationError(f"{name}: header truncated ({len(buf)} bytes)")
    magic, flag, n, c, h, w = _RAW_HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if flag not in (0, 1):
        raise FormatError(f"{name}: has_labels flag must be 0 or 1, got {flag}")
    count = n * c * h * w
    need = _RAW_HEADER.size + 8 * count + (4 * n if flag else 0)
    if len(buf) < need:
        raise TruncationError(f"{name}: expected {need} bytes, file has {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"{name}: {len(buf) - need} unexpected trailing bytes")
    off = _RAW_HEADER.size
    images = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(n, c, h, w)
    if count and (not np.all(np.isfinite(images)) or images.min() < 0 or images.max() > 1):
        raise FormatError(f"{name}: pixel values outside [0, 1]")
    labels = None
    if flag:
        labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off + 8 * count).astype(np.int64)
    return Dataset(images, labels, name)


def save_raw_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dump_raw_dataset(ds))


def load_raw_dataset(path: Union[str, Path], name: Optional[str] = None) -> Dataset:
    path = Path(path)
    return parse_raw_dataset(path.read_bytes(), name or path.stem)


# ---------------------------------------------------------------------------
# synthetic circle-of-Gaussians benchmark


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    n_per_class: int = 500
    class_mean_radius: float = 4.0
    sigma: float = 1.0
    ood_kind: str = "ring"
    seed: int = 0
    n_ood: Optional[int] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.n_per_class < 2:
            raise ConfigError(f"n_per_class must be >= 2, got {self.n_per_class}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not self.class_mean_radius > 0:
            raise ConfigError(f"class_mean_radius must be positive, got {self.class_mean_radius}")
        if self.ood_kind not in ("ring", "shifted"):
            raise ConfigError(f"ood_kind must be 'ring' or 'shifted', got {self.ood_kind!r}")
        if self.n_ood is not None and self.n_ood < 1:
            raise ConfigError("n_ood must be positive")

    @property
    def half_extent(self) -> float:
        """Raw coordinates in [-E, E] map onto pixels [0, 1]."""
        return 2.0 * self.class_mean_radius + 4.0 * self.sigma


def to_pixels(points: np.ndarray, half_extent: float) -> np.ndarray:
    """Map raw 2-D points onto 1 x 1 x 2 images: pixel = 0.5 + raw / (2 E), clipped to [0, 1]."""
    px = 0.5 + np.asarray(points, dtype=np.float64) / (2.0 * half_extent)
    return np.clip(px, 0.0, 1.0).reshape(-1, 1, 1, 2)


def from_pixels(images: np.ndarray, half_extent: float) -> np.ndarray:
    return (np.asarray(images).reshape(-1, 2) - 0.5) * (2.0 * half_extent)


def class_means(num_classes: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(num_classes) / num_classes
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def ring_points(n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def synth_gaussian_benchmark(cfg: SynthConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Return ``(id_train, id_test, ood_test)`` for the circle-of-Gaussians benchmark.

    Class ``c`` is N(r (cos 2 pi c / K, sin 2 pi c / K), sigma^2 I); each class is
    split 80/20 so both ID splits stay balanced.  ``ring`` OOD points lie on the
    circle of radius 2r; ``shifted`` OOD points are Gaussians centred half-way
    (in angle) between neighbouring classes at radius r.
    """
    rng = np.random.default_rng(cfg.seed)
    k, n = cfg.num_classes, cfg.n_per_class
    means = class_means(k, cfg.class_mean_radius)
    pts = means[np.repeat(np.arange(k), n)] + cfg.sigma * rng.standard_normal((k * n, 2))
    labels = np.repeat(np.arange(k), n)
    n_train = int(math.floor(0.8 * n))
    train_idx, test_idx = [], []
    for c in range(k):
        order = c * n + rng.permutation(n)
        train_idx.append(order[:n_train])
        test_idx.append(order[n_train:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))

    n_ood = cfg.n_ood if cfg.n_ood is not None else len(test_idx)
    if cfg.ood_kind == "ring":
        ood = ring_points(n_ood, 2.0 * cfg.class_mean_radius, rng)
    else:
        ang = 2.0 * np.pi * (rng.integers(0, k, size=n_ood) + 0.5) / k
        centres = cfg.class_mean_radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        ood = centres + cfg.sigma * rng.standard_normal((n_ood, 2))

    e = cfg.half_extent
    tag = (
        f"K={k};r={cfg.class_mean_radius:g};sigma={cfg.sigma:g};seed={cfg.seed};"
        f"pixel=0.5+raw/{2 * e:g}"
    )
    id_train = Dataset(to_pixels(pts[train_idx], e), labels[train_idx], f"synth-id-train[{tag}]")
    id_test = Dataset(to_pixels(pts[test_idx], e), labels[test_idx], f"synth-id-test[{tag}]")
    ood_test = Dataset(to_pixels(ood, e), None, f"synth-ood-{cfg.ood_kind}[{tag}]")
    return id_train, id_test, ood_test


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    shuffle_seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")


def batch_indices(n: int, plan: BatchPlan) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into consecutive chunks of ``plan.batch_size``."""
    if plan.batch_size > n:
        raise ConfigError(f"batch size {plan.batch_size} exceeds dataset size {n}")
    order = np.random.default_rng(plan.shuffle_seed).permutation(n)
    chunks = [order[i : i + plan.batch_size] for i in range(0, n, plan.batch_size)]
    if plan.drop_last and len(chunks[-1]) < plan.batch_size:
        chunks.pop()
    return chunks


def batches(ds: Dataset, plan: BatchPlan) -> Iterator[tuple[Tensor, Optional[np.ndarray]]]:
    for idx in batch_indices(len(ds), plan):
        y = None if ds.labels is None else ds.labels[idx]
        yield Tensor(ds.images[idx]), y
