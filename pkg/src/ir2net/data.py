"""CIFAR-10 binary-format ingestion, seeded subsets, batching and augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


class FormatError(ValueError):
    """A CIFAR binary file that does not follow the 3073-byte record layout."""


@dataclass
class Split:
    """Images as raw uint8 (N,3,32,32) plus int64 labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise FormatError(f"images must be uint8 (N,C,H,W), got {self.images.dtype} {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise FormatError("image and label counts differ")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Split":
        idx = np.asarray(indices, dtype=np.int64)
        return Split(self.images[idx], self.labels[idx])


def parse_records(raw: bytes, num_classes: int = 10, source: str = "<bytes>") -> Split:
    if len(raw) % RECORD_BYTES:
        raise FormatError(f"{source}: {len(raw)} bytes is not a multiple of {RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"{source}: record {bad[0]} has label {labels[bad[0]]} >= {num_classes}")
    images = records[:, 1:].reshape((-1,) + IMAGE_SHAPE).copy()
    return Split(images, labels)


def encode_records(split: Split) -> bytes:
    """Inverse of `parse_records`."""
    if split.images.shape[1:] != IMAGE_SHAPE:
        raise FormatError(f"CIFAR records hold {IMAGE_SHAPE} images, got {split.images.shape[1:]}")
    n = len(split)
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = split.labels
    out[:, 1:] = split.images.reshape(n, -1)
    return out.tobytes()


def read_batch_file(path: str | Path, num_classes: int = 10) -> Split:
    path = Path(path)
    return parse_records(path.read_bytes(), num_classes, str(path))


def _concat(parts: list[Split]) -> Split:
    return Split(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def load_cifar10(directory: str | Path) -> tuple[Split, Split]:
    """Read the five training batches and the test batch of the binary CIFAR-10 release."""
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    missing = [n for n in TRAIN_FILES + TEST_FILES if not (directory / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing CIFAR-10 batch files {missing}")
    train = _concat([read_batch_file(directory / n) for n in TRAIN_FILES])
    test = _concat([read_batch_file(directory / n) for n in TEST_FILES])
    return train, test


def subset_indices(n: int, size: int, seed: int) -> np.ndarray:
    """First `size` entries of a seeded permutation of range(n); size 0 keeps everything in order."""
    if size < 0 or size > n:
        raise ValueError(f"subset of {size} from {n} samples")
    if size == 0:
        return np.arange(n)
    return np.random.default_rng(seed).permutation(n)[:size]


def synthetic_cifar(n: int, num_classes: int = 10, seed: int = 0, size: int = 32, noise: float = 40.0) -> Split:
    """Learnable CIFAR-shaped data: one smooth random prototype per class plus pixel noise."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0, 255, (num_classes, 3, 4, 4))
    protos = coarse.repeat(size // 4, axis=2).repeat(size // 4, axis=3)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = protos[labels] + rng.normal(0, noise, (n, 3, size, size))
    return Split(np.clip(np.rint(images), 0, 255).astype(np.uint8), labels.astype(np.int64))


def write_cifar_dir(directory: str | Path, train: Split, test: Split) -> Path:
    """Lay `train`/`test` out as the six binary batch files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, chunk in enumerate(np.array_split(np.arange(len(train)), len(TRAIN_FILES))):
        (directory / TRAIN_FILES[i]).write_bytes(encode_records(train.subset(chunk)))
    (directory / TEST_FILES[0]).write_bytes(encode_records(test))
    return directory


def load_dataset(data_dir: str, num_classes: int, train_subset: int, test_subset: int,
                 seed: int, input_size: int = 32) -> tuple[Split, Split]:
    """Resolve a config's data source: a CIFAR directory or "synthetic"."""
    if data_dir == "synthetic":
        n_train = train_subset or 1000
        n_test = test_subset or 200
        full = synthetic_cifar(n_train + n_test, num_classes, seed=1234, size=input_size)
        return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n_train + n_test))
    train, test = load_cifar10(data_dir)
    if int(train.labels.max()) >= num_classes:
        raise FormatError(f"dataset labels exceed num_classes={num_classes}")
    train = train.subset(subset_indices(len(train), train_subset, seed))
    test = test.subset(subset_indices(len(test), test_subset, seed + 1))
    return train, test


def normalize(images: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    x = images.astype(dtype) / dtype(255.0)
    m = np.asarray(mean, dtype=dtype)[None, :, None, None]
    s = np.asarray(std, dtype=dtype)[None, :, None, None]
    return (x - m) / s


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded image plus a random horizontal flip, per sample."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def iterate_batches(split: Split, batch_size: int, rng: np.random.Generator | None = None):
    """Yield (images, labels) index batches; shuffled when an rng is given."""
    order = rng.permutation(len(split)) if rng is not None else np.arange(len(split))
    for start in range(0, len(split), batch_size):
        idx = order[start:start + batch_size]
        yield split.images[idx], split.labels[idx]
