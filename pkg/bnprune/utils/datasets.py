"""
Datasets - MNIST IDX and CIFAR-10 binary loaders, synthetic blobs, augmentation and batching

Byte layouts
------------
IDX (big-endian): 2 zero bytes, a type byte (0x08 = unsigned byte), a rank byte,
then one uint32 per dimension, then the data. Images use magic 0x00000803
(rank 3: count, rows, cols), labels 0x00000801 (rank 1: count).

CIFAR-10 binary v1: fixed 3073-byte records, one label byte followed by
3072 pixel bytes stored channel-planar (1024 red, 1024 green, 1024 blue,
each row-major 32x32).
"""
from typing import Iterator, Optional, Tuple
from pathlib import Path
import gzip
import logging

import numpy as np

from bnprune.config import AugmentConfig, DatasetConfig, SynthSpec, settings
from bnprune.exceptions import DatasetFormatError, ShapeError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
CIFAR_SIDE = 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


class Dataset:
    """Images (N, H, W, C) with integer labels"""

    def __init__(
        self,
        images: np.ndarray,
        labels: np.ndarray,
        split: str = "train",
        num_classes: int = 10,
        stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ):
        images = np.asarray(images)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise ShapeError(f"Images must be (N, H, W, C), got shape {images.shape}")
        if images.shape[0] == 0:
            raise ShapeError("Dataset is empty")
        if labels.shape != (images.shape[0],):
            raise ShapeError(f"Labels shape {labels.shape} does not match {images.shape[0]} images")
        if labels.min() < 0 or labels.max() >= num_classes:
            raise DatasetFormatError(f"Labels must lie in [0, {num_classes}), found [{labels.min()}, {labels.max()}]")
        self.images = images
        self.labels = labels
        self.split = split
        self.num_classes = num_classes
        self.stats = stats

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def channel_stats(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and standard deviation over (N, H, W)"""
        data = self.images.astype(np.float64)
        return data.mean(axis=(0, 1, 2)), data.std(axis=(0, 1, 2))

    def standardize(self, stats: Optional[Tuple[np.ndarray, np.ndarray]] = None, dtype: str = "float64") -> "Dataset":
        """Zero mean, unit variance per channel, using the given (train-split) statistics"""
        mean, std = stats if stats is not None else self.channel_stats()
        images = (self.images.astype(np.float64) - mean) / np.where(std > 0, std, 1.0)
        return Dataset(images.astype(dtype), self.labels, self.split, self.num_classes, (mean, std))

    def take(self, limit: Optional[int]) -> "Dataset":
        if limit is None or limit >= len(self):
            return self
        return Dataset(self.images[:limit], self.labels[:limit], self.split, self.num_classes, self.stats)

    def astype(self, dtype: str) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.split, self.num_classes, self.stats)


# ------------------------------------------------------------------ IDX / CIFAR


def _read_bytes(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as handle:
                return handle.read()
        return path.read_bytes()
    except FileNotFoundError:
        raise DatasetFormatError(f"Dataset file not found: {path}")
    except OSError as e:
        raise DatasetFormatError(f"Cannot read dataset file {path}: {e}")


def parse_idx(buffer: bytes, expected_magic: int, source: str = "<bytes>") -> np.ndarray:
    """Decode one unsigned-byte IDX array"""
    if len(buffer) < 4:
        raise DatasetFormatError(f"{source}: truncated IDX header, {len(buffer)} bytes", offset=len(buffer))
    magic = int.from_bytes(buffer[:4], "big")
    if magic != expected_magic:
        raise DatasetFormatError(f"{source}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)

    rank = buffer[3]
    header = 4 + 4 * rank
    if len(buffer) < header:
        raise DatasetFormatError(f"{source}: truncated IDX header, {len(buffer)} of {header} bytes", offset=len(buffer))
    dims = tuple(int.from_bytes(buffer[4 + 4 * i:8 + 4 * i], "big") for i in range(rank))

    expected = header + int(np.prod(dims))
    if len(buffer) < expected:
        raise DatasetFormatError(
            f"{source}: truncated IDX data, {len(buffer)} of {expected} bytes for dims {dims}", offset=len(buffer)
        )
    return np.frombuffer(buffer, dtype=np.uint8, count=expected - header, offset=header).reshape(dims)


def _resolve(path: str) -> Path:
    candidate = Path(path)
    if not candidate.is_absolute() and not candidate.exists():
        candidate = Path(settings.DATA_DIR) / candidate
    return candidate


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DatasetFormatError(f"Dataset file not found: {directory / name}")


def load_mnist(path: str, split: str = "train") -> Dataset:
    """Official MNIST IDX files in ``path`` -> (N, 28, 28, 1) in [0, 1]"""
    directory = _resolve(path)
    image_name, label_name = MNIST_FILES[split]
    image_path, label_path = _find(directory, image_name), _find(directory, label_name)

    images = parse_idx(_read_bytes(image_path), IDX_IMAGES_MAGIC, str(image_path))
    raw_labels = _read_bytes(label_path)
    labels = parse_idx(raw_labels, IDX_LABELS_MAGIC, str(label_path))
    if images.ndim != 3 or labels.ndim != 1:
        raise DatasetFormatError(f"{image_path}: unexpected IDX ranks {images.ndim} / {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(f"{image_path}: {images.shape[0]} images but {labels.shape[0]} labels")
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetFormatError(f"{label_path}: label {labels[bad[0]]} > 9", offset=8 + int(bad[0]))

    logger.info(f"Loaded MNIST {split}: {images.shape[0]} images from {directory}")
    return Dataset(images[..., None].astype(np.float64) / 255.0, labels, split, 10)


def parse_cifar10(buffer: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary records into NHWC uint8 images and labels"""
    if len(buffer) == 0:
        raise DatasetFormatError(f"{source}: empty CIFAR-10 file", offset=0)
    remainder = len(buffer) % CIFAR_RECORD_BYTES
    if remainder:
        start = len(buffer) - remainder
        raise DatasetFormatError(
            f"{source}: truncated CIFAR-10 record, {remainder} of {CIFAR_RECORD_BYTES} bytes", offset=start
        )
    records = np.frombuffer(buffer, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetFormatError(f"{source}: label {labels[bad[0]]} > 9", offset=int(bad[0]) * CIFAR_RECORD_BYTES)
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return images, labels


def load_cifar10(path: str, split: str = "train") -> Dataset:
    """CIFAR-10 binary batches (a directory or one batch file) -> (N, 32, 32, 3) in [0, 1]"""
    location = _resolve(path)
    files = [location] if location.is_file() else [_find(location, name) for name in CIFAR_FILES[split]]
    parts = [parse_cifar10(_read_bytes(f), str(f)) for f in files]
    images = np.concatenate([p[0] for p in parts], axis=0)
    labels = np.concatenate([p[1] for p in parts], axis=0)
    logger.info(f"Loaded CIFAR-10 {split}: {images.shape[0]} images from {location}")
    return Dataset(images.astype(np.float64) / 255.0, labels, split, 10)


# ------------------------------------------------------------------ synthetic


def synth_dataset(spec: SynthSpec, split: str = "train") -> Dataset:
    """Gaussian blobs: class means differ only on the informative channels

    Means sit ``separation`` apart along one seeded direction, shared by both splits.
    """
    seed = spec.seed if split == "train" else spec.seed + 1
    rng = np.random.default_rng(seed)
    means_rng = np.random.default_rng(spec.seed)
    channels = spec.informative_channels + spec.noise_channels

    direction = means_rng.standard_normal(spec.informative_channels)
    direction /= np.linalg.norm(direction)
    offsets = np.arange(spec.num_classes) - (spec.num_classes - 1) / 2.0
    class_means = np.outer(offsets, direction) * spec.separation

    images, labels = [], []
    for label in range(spec.num_classes):
        shape = (spec.samples_per_class, spec.height, spec.width, channels)
        blob = rng.standard_normal(shape) * spec.noise_std
        blob[..., :spec.informative_channels] += class_means[label]
        images.append(blob)
        labels.append(np.full(spec.samples_per_class, label))

    images = np.concatenate(images, axis=0)
    labels = np.concatenate(labels, axis=0)
    order = rng.permutation(images.shape[0])
    return Dataset(images[order], labels[order], split, spec.num_classes)


def load_dataset(config: DatasetConfig, split: str) -> Dataset:
    if config.kind == "mnist":
        dataset = load_mnist(config.path, split)
    elif config.kind == "cifar10":
        dataset = load_cifar10(config.path, split)
    else:
        dataset = synth_dataset(config.synth, split)
    return dataset.take(config.limit)


def prepare_splits(config: DatasetConfig, dtype: str = "float64") -> Tuple[Dataset, Dataset]:
    """Train and eval splits standardized with train statistics

    With augmentation active the train split stays raw (stats attached) and is
    standardized per batch after augmenting.
    """
    train = load_dataset(config, config.train_split)
    evaluation = load_dataset(config, config.eval_split)
    if config.standardize == "dataset":
        stats = train.channel_stats()
        if config.augment.active:
            raw = Dataset(train.images.astype(dtype), train.labels, train.split, train.num_classes, stats)
            return raw, evaluation.standardize(stats, dtype)
        return train.standardize(stats, dtype), evaluation.standardize(stats, dtype)
    if config.standardize == "image":
        return standardize_images(train).astype(dtype), standardize_images(evaluation).astype(dtype)
    return train.astype(dtype), evaluation.astype(dtype)


def standardize_images(dataset: Dataset) -> Dataset:
    """Per-image standardization over (H, W, C)"""
    data = dataset.images.astype(np.float64)
    mean = data.mean(axis=(1, 2, 3), keepdims=True)
    std = data.std(axis=(1, 2, 3), keepdims=True)
    images = (data - mean) / np.maximum(std, 1.0 / np.sqrt(data[0].size))
    return Dataset(images, dataset.labels, dataset.split, dataset.num_classes)


# ------------------------------------------------------------------ augmentation


def augment(
    images: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
    """pad -> crop -> flip -> brightness/contrast -> standardize on a (N, H, W, C) batch"""
    batch = np.array(images, dtype=np.float64, copy=True)
    n, h, w, _ = batch.shape

    if config.pad:
        if config.pad_size < max(h, w):
            raise ShapeError(f"pad_size {config.pad_size} is smaller than the image {h}x{w}")
        top, left = (config.pad_size - h) // 2, (config.pad_size - w) // 2
        padded = np.zeros((n, config.pad_size, config.pad_size, batch.shape[3]))
        padded[:, top:top + h, left:left + w] = batch
        batch = padded

    if config.crop:
        ph, pw = batch.shape[1:3]
        if config.crop_size > min(ph, pw):
            raise ShapeError(f"crop_size {config.crop_size} is larger than the padded image {ph}x{pw}")
        rows = rng.integers(0, ph - config.crop_size + 1, size=n)
        cols = rng.integers(0, pw - config.crop_size + 1, size=n)
        batch = np.stack(
            [batch[i, r:r + config.crop_size, c:c + config.crop_size] for i, (r, c) in enumerate(zip(rows, cols))]
        )

    if config.flip:
        flips = rng.random(n) < 0.5
        batch[flips] = batch[flips, :, ::-1]

    if config.brightness:
        batch += rng.uniform(-config.brightness_delta, config.brightness_delta, size=(n, 1, 1, 1))

    if config.contrast:
        low, high = config.contrast_range
        factor = rng.uniform(low, high, size=(n, 1, 1, 1))
        mean = batch.mean(axis=(1, 2), keepdims=True)
        batch = (batch - mean) * factor + mean

    if config.standardize and stats is not None:
        mean, std = stats
        batch = (batch - mean) / np.where(std > 0, std, 1.0)
    return batch


# ------------------------------------------------------------------ batching


def iterate_batches(
    dataset: Dataset,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    drop_last: bool = False,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """One pass over the data; shuffled with ``rng`` when given"""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        index = order[start:start + batch_size]
        if drop_last and index.size < batch_size:
            break
        yield dataset.images[index], dataset.labels[index]


def stream_batches(
    dataset: Dataset,
    batch_size: int,
    rng: np.random.Generator,
    augment_config: Optional[AugmentConfig] = None,
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Endless reshuffled passes; augmentation applied per batch"""
    while True:
        for images, labels in iterate_batches(dataset, batch_size, rng):
            if augment_config is not None:
                images = augment(images, augment_config, rng, stats).astype(dataset.images.dtype)
            yield images, labels
