"""IDX (MNIST) and CIFAR binary loaders, normalisation, subsampling, batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .rng import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray  # per channel
    std: np.ndarray

    def apply(self, images: np.ndarray) -> np.ndarray:
        return (images - self.mean.reshape(1, -1, 1, 1)) / self.std.reshape(1, -1, 1, 1)

    @classmethod
    def fit(cls, images: np.ndarray) -> "Normalization":
        c = images.shape[1]
        if images.shape[0] == 0:
            return cls(np.zeros(c), np.ones(c))
        mean = images.mean(axis=(0, 2, 3))
        std = images.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)  # constant channels are only centred
        return cls(mean, std)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64, normalised
    labels: np.ndarray  # (N,) int64
    class_count: int
    norm: Normalization

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise FormatError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(buf: bytes, magic: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError(f"{what}: truncated header at byte offset {len(buf)}")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x} at byte offset 0 (expected 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{what}: truncated header at byte offset {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = header + int(np.prod(dims))
    if len(buf) != expected:
        raise FormatError(f"{what}: expected {expected} bytes, file ends at byte offset {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, norm: Normalization | None = None, class_count: int = 10) -> Dataset:
    """Load an IDX image/label pair (optionally gzipped).

    Pixels are scaled to [0, 1] and standardised per channel, with statistics
    fitted on this split unless ``norm`` is given.
    """
    pix = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(pix) != len(labels):
        raise FormatError(f"count mismatch: {len(pix)} images vs {len(labels)} labels "
                          f"(header byte offset 4)")
    images = pix.astype(np.float64)[:, None] / 255.0
    norm = norm or Normalization.fit(images)
    return Dataset(norm.apply(images), labels.astype(np.int64), class_count, norm)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for single-channel datasets (bytes are rounded)."""
    raw = ds.images * ds.norm.std.reshape(1, -1, 1, 1) + ds.norm.mean.reshape(1, -1, 1, 1)
    pix = np.clip(np.rint(raw[:, 0] * 255.0), 0, 255).astype(np.uint8)
    n, h, w = pix.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


def load_cifar_binary(path, norm: Normalization | None = None, class_count: int = 10) -> Dataset:
    """Load CIFAR-10 style binary records: label byte then 3 x 1024 pixel bytes (R, G, B)."""
    buf = _read(path)
    if len(buf) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD} "
                          f"(partial record at byte offset {len(buf) - len(buf) % CIFAR_RECORD})")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= class_count)
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    norm = norm or Normalization.fit(images)
    return Dataset(norm.apply(images), labels, class_count, norm)


def find_idx_pair(data_dir, split: str = "train") -> tuple[Path, Path]:
    """Locate ``{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`` inside ``data_dir``."""
    prefix = {"train": "train", "test": "t10k"}[split]
    found = []
    for kind in ("images-idx3", "labels-idx1"):
        stem = Path(data_dir) / f"{prefix}-{kind}-ubyte"
        for cand in (stem, stem.with_name(stem.name + ".gz")):
            if cand.exists():
                found.append(cand)
                break
        else:
            raise FileNotFoundError(f"no {stem.name}[.gz] in {data_dir}")
    return found[0], found[1]


def load_idx_dir(data_dir) -> tuple[Dataset, Dataset]:
    """Train and test splits; the test split reuses the training statistics."""
    train = load_idx(*find_idx_pair(data_dir, "train"))
    test = load_idx(*find_idx_pair(data_dir, "test"), norm=train.norm)
    return train, test


def renormalize(ds: Dataset, norm: Normalization | None = None) -> Dataset:
    """Refit (or apply ``norm``) on the raw pixels behind ``ds``."""
    raw = ds.images * ds.norm.std.reshape(1, -1, 1, 1) + ds.norm.mean.reshape(1, -1, 1, 1)
    norm = norm or Normalization.fit(raw)
    return replace(ds, images=norm.apply(raw), norm=norm)


def subsample(ds: Dataset, n: int, rng: Rng) -> Dataset:
    """Stratified random subset: ``n // K`` per class, remainder spread over the first classes."""
    if n > len(ds):
        raise ParameterError(f"cannot draw {n} samples from a dataset of {len(ds)}")
    k = ds.class_count
    per_class = [n // k + (1 if c < n % k else 0) for c in range(k)]
    chosen = []
    for c in range(k):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < per_class[c]:
            raise ParameterError(f"class {c} has {len(members)} samples, need {per_class[c]}")
        chosen.append(members[rng.permutation(len(members))[: per_class[c]]])
    idx = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.intp)
    return ds.take(np.sort(idx))


def batches(ds: Dataset, batch_size: int, shuffle: bool = False, rng: Rng | None = None,
            hflip: bool = False):
    """Yield ``(images, labels)`` minibatches; the last batch may be partial."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be positive, got {batch_size}")
    order = rng.permutation(len(ds)) if shuffle else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        images = ds.images[idx]
        if hflip:
            flips = np.array([rng.randint(2) for _ in idx], dtype=bool)
            images = images.copy()
            images[flips] = images[flips][..., ::-1]
        yield images, ds.labels[idx]
