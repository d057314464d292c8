"""Image dataset ingestion: MNIST IDX, CIFAR binary batches, synthetic sets."""

import logging
import os
import struct
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ansguard import DEFAULT_SEED
from ansguard.errors import ConfigError, DataMissingError, FormatError, LengthError, ShapeError
from ansguard.tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

DATA_ENV = "ANSGUARD_DATA"
DEFAULT_DATA_DIR = Path.home() / ".cache" / "ansguard" / "data"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR10_RECORD = 1 + CIFAR_PIXELS
CIFAR100_RECORD = 2 + CIFAR_PIXELS

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_DIR = "cifar-10-batches-bin"
CIFAR10_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}
CIFAR100_DIR = "cifar-100-binary"
CIFAR100_FILES = {"train": ("train.bin",), "test": ("test.bin",)}
DATASETS = ("mnist", "cifar10", "cifar100", "synthetic")


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W), values in [0, 1]
    labels: np.ndarray  # (N,) ints in [0, classes)
    classes: int
    name: str

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ShapeError(f"{self.name}: images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(
                f"{self.name}: {len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ConfigError(f"{self.name}: labels outside [0, {self.classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError(f"{self.name}: pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, indices, name: str | None = None) -> "LabeledImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(
            self.images[indices], self.labels[indices], self.classes, name or self.name
        )


def data_dir(override: str | os.PathLike | None = None) -> Path:
    """Resolve the dataset root: explicit path, then $ANSGUARD_DATA, then the cache dir."""
    if override:
        return Path(override)
    env = os.environ.get(DATA_ENV)
    return Path(env) if env else DEFAULT_DATA_DIR


def _read_idx(raw: bytes, magic: int, path) -> tuple[tuple[int, ...], np.ndarray]:
    if len(raw) < 4:
        raise LengthError(f"{path}: {len(raw)} bytes, too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise LengthError(f"{path}: {len(raw) - header} payload bytes, header declares {count}")
    if len(raw) - header > count:
        raise FormatError(f"{path}: {len(raw) - header - count} trailing bytes after payload")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, classes: int = 10) -> LabeledImageSet:
    images_path, labels_path = Path(images_path), Path(labels_path)
    for path in (images_path, labels_path):
        if not path.is_file():
            raise DataMissingError(f"MNIST file not found: {path}")
    dims, pixels = _read_idx(images_path.read_bytes(), IDX_IMAGES_MAGIC, images_path)
    _, labels = _read_idx(labels_path.read_bytes(), IDX_LABELS_MAGIC, labels_path)
    if dims[0] != len(labels):
        raise FormatError(f"{images_path}: {dims[0]} images but {len(labels)} labels")
    if len(labels) and labels.max() >= classes:
        raise FormatError(f"{labels_path}: label {labels.max()} >= {classes}")
    images = pixels.astype(DTYPE)[:, None, :, :] / DTYPE(255.0)
    logger.info("loaded %d MNIST images from %s", len(labels), images_path)
    return LabeledImageSet(images, labels.astype(np.int64), classes, images_path.name)


def write_mnist_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write (N, H, W) uint8 pixels and N uint8 labels as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    header = struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(f">{pixels.ndim}I", *pixels.shape)
    Path(images_path).write_bytes(header + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()
    )


def _read_records(paths: Sequence, record: int) -> np.ndarray:
    chunks = []
    for path in map(Path, paths):
        if not path.is_file():
            raise DataMissingError(f"CIFAR batch not found: {path}")
        raw = path.read_bytes()
        if len(raw) % record:
            raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of {record}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, record))
    if not chunks:
        raise ConfigError("no CIFAR batch files given")
    return np.concatenate(chunks)


def load_cifar10_bin(paths: Sequence) -> LabeledImageSet:
    records = _read_records(paths, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    if len(labels) and labels.max() >= 10:
        raise FormatError(f"CIFAR-10 label {labels.max()} >= 10")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(DTYPE) / DTYPE(255.0)
    return LabeledImageSet(images, labels, 10, Path(paths[0]).name)


def load_cifar100_bin(paths: Sequence) -> LabeledImageSet:
    """CIFAR-100 records carry a coarse and a fine label byte; the fine one is kept."""
    records = _read_records(paths, CIFAR100_RECORD)
    labels = records[:, 1].astype(np.int64)
    if len(labels) and labels.max() >= 100:
        raise FormatError(f"CIFAR-100 fine label {labels.max()} >= 100")
    images = records[:, 2:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(DTYPE) / DTYPE(255.0)
    return LabeledImageSet(images, labels, 100, Path(paths[0]).name)


def descale_to_bytes(images: np.ndarray) -> np.ndarray:
    return np.rint(images.astype(np.float64) * 255.0).astype(np.uint8)


def synthetic_gaussians(
    n: int = 256,
    classes: int = 2,
    size: int = 8,
    channels: int = 1,
    spread: float = 0.1,
    seed: int = DEFAULT_SEED,
) -> LabeledImageSet:
    """Images whose pixels are Gaussian around a per-class brightness level."""
    if n < 1 or classes < 2:
        raise ConfigError(f"synthetic set needs n >= 1 and classes >= 2, got {n}, {classes}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    levels = np.linspace(0.2, 0.8, classes)
    noise = rng.normal(0.0, spread, size=(n, channels, size, size))
    images = np.clip(levels[labels][:, None, None, None] + noise, 0.0, 1.0).astype(DTYPE)
    return LabeledImageSet(images, labels.astype(np.int64), classes, f"synthetic-{seed}")


def stratified_indices(labels: np.ndarray, classes: int, k: int, seed: int) -> np.ndarray:
    """Sorted indices of a k-item sample with per-class quotas by largest remainder."""
    if not 0 < k <= len(labels):
        raise ConfigError(f"cannot subsample {k} of {len(labels)} items")
    counts = np.bincount(labels, minlength=classes)
    exact = k * counts / len(labels)
    quotas = np.floor(exact).astype(np.int64)
    remainder_order = np.argsort(-(exact - quotas), kind="stable")
    quotas[remainder_order[: k - quotas.sum()]] += 1
    rng = np.random.default_rng(seed)
    chosen = [
        rng.permutation(np.flatnonzero(labels == cls))[:quota]
        for cls, quota in enumerate(quotas)
    ]
    return np.sort(np.concatenate(chosen))


def subsample(data: LabeledImageSet, k: int, seed: int = DEFAULT_SEED) -> LabeledImageSet:
    indices = stratified_indices(data.labels, data.classes, k, seed)
    return data.take(indices, f"{data.name}[{k}]")


def split(
    data: LabeledImageSet, test_fraction: float, seed: int = DEFAULT_SEED
) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Disjoint stratified (train, test) split."""
    test_index = stratified_indices(
        data.labels, data.classes, max(1, round(test_fraction * len(data))), seed
    )
    mask = np.ones(len(data), dtype=bool)
    mask[test_index] = False
    return data.take(np.flatnonzero(mask)), data.take(test_index)


def batches(
    data: LabeledImageSet,
    batch_size: int,
    shuffle: bool = False,
    seed: int = DEFAULT_SEED,
) -> Iterator[tuple[Tensor, np.ndarray]]:
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(data)) if shuffle else np.arange(len(data))
    for start in range(0, len(data), batch_size):
        index = order[start : start + batch_size]
        yield Tensor(data.images[index]), data.labels[index]


def load_dataset(name: str, split_name: str = "test", root=None) -> LabeledImageSet:
    """Load a named dataset split from the data directory."""
    root = data_dir(root)
    if name == "mnist":
        images, labels = MNIST_FILES[split_name]
        return load_mnist_idx(root / images, root / labels)
    if name == "cifar10":
        return load_cifar10_bin([root / CIFAR10_DIR / f for f in CIFAR10_FILES[split_name]])
    if name == "cifar100":
        return load_cifar100_bin([root / CIFAR100_DIR / f for f in CIFAR100_FILES[split_name]])
    if name == "synthetic":
        seed = DEFAULT_SEED if split_name == "train" else DEFAULT_SEED + 1
        return synthetic_gaussians(n=512, seed=seed)
    raise ConfigError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")


def has_dataset(name: str, root=None) -> bool:
    root = data_dir(root)
    if name == "mnist":
        return all((root / f).is_file() for pair in MNIST_FILES.values() for f in pair)
    if name == "cifar10":
        return all((root / CIFAR10_DIR / f).is_file() for fs in CIFAR10_FILES.values() for f in fs)
    if name == "cifar100":
        return all((root / CIFAR100_DIR / f).is_file() for fs in CIFAR100_FILES.values() for f in fs)
    return name == "synthetic"
