"""
MNIST ingestion in IDX format, deterministic batching and subset selection.

IDX layout (big-endian):
    u32 magic      0x00000803 for images, 0x00000801 for labels
    u32 dims[...]  count, then rows and columns for images
    u8  payload    row-major pixels or labels

Files may be gzip-compressed; compression is detected from the 0x1f8b prefix.
"""
import gzip
import os
import struct
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from rp_utils import (BadMagicError, ConfigError, DataError, DimensionMismatchError,
                      TruncatedDataError, setup_logger)

logger = setup_logger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
GZIP_PREFIX = b'\x1f\x8b'
NUM_CLASSES = 10
BALANCE_TOLERANCE = 0.2
BALANCE_MIN_COUNT = 1000
MAX_RESAMPLES = 100

MNIST_FILES = {
    'train_images': 'train-images-idx3-ubyte',
    'train_labels': 'train-labels-idx1-ubyte',
    'test_images': 't10k-images-idx3-ubyte',
    'test_labels': 't10k-labels-idx1-ubyte',
}

# Official distribution: (url, compressed bytes, uncompressed bytes)
MNIST_SOURCES: Dict[str, Tuple[str, int, int]] = {
    'train_images': ('https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz', 9912422, 47040016),
    'train_labels': ('https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz', 28881, 60008),
    'test_images': ('https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz', 1648877, 7840016),
    'test_labels': ('https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz', 4542, 10008),
}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # float32 [N, 1, H, W] in [0, 1]
    labels: np.ndarray  # int64 [N] in [0, 10)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DimensionMismatchError(f"Dataset images must be [N, 1, H, W], got {list(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise DimensionMismatchError(
                f"Dataset has {len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("Dataset pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise DataError(f"Dataset labels must lie in [0, {NUM_CLASSES})")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices: Sequence[int]) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(images=self.images[indices], labels=self.labels[indices])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int
    order: np.ndarray

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")

    @classmethod
    def create(cls, n: int, batch_size: int, seed: int, shuffle: bool = True) -> 'BatchPlan':
        order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
        return cls(batch_size=batch_size, seed=seed, order=order)

    def __len__(self) -> int:
        return -(-len(self.order) // self.batch_size)

    def batches(self, dataset: Dataset) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for start in range(0, len(self.order), self.batch_size):
            chunk = self.order[start:start + self.batch_size]
            yield dataset.images[chunk], dataset.labels[chunk]


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    if raw[:2] == GZIP_PREFIX:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise TruncatedDataError(f"{path}: gzip stream is corrupt or truncated: {e}") from e
    return raw


def _parse_idx(raw: bytes, path: str, field: str, magic: int, rank: int) -> np.ndarray:
    header_size = 4 * (1 + rank)
    if len(raw) < 4:
        raise TruncatedDataError(f"{path}: {field} file ends inside the magic number")
    (found,) = struct.unpack('>I', raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: bad magic 0x{found:08x} in {field} file (expected 0x{magic:08x})")
    if len(raw) < header_size:
        raise TruncatedDataError(f"{path}: {field} header announces {rank} dims but the file ends early")
    dims = struct.unpack(f'>{rank}I', raw[4:header_size])
    expected = int(np.prod(dims))
    payload = len(raw) - header_size
    if payload < expected:
        raise TruncatedDataError(
            f"{path}: {field} payload has {payload} bytes, header dims {list(dims)} need {expected}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_size).reshape(dims)


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """
    Load an IDX image/label file pair

    Parameters:
    - images_path: IDX3 images file (optionally gzipped)
    - labels_path: IDX1 labels file (optionally gzipped)

    Returns:
    Dataset with pixels divided by 255
    """
    try:
        pixels = _parse_idx(_read_bytes(images_path), images_path, 'images', IMAGES_MAGIC, 3)
        labels = _parse_idx(_read_bytes(labels_path), labels_path, 'labels', LABELS_MAGIC, 1)
        if len(pixels) != len(labels):
            raise DimensionMismatchError(
                f"Image count {len(pixels)} in {images_path} does not match label count "
                f"{len(labels)} in {labels_path}")
        if labels.size and labels.max() >= NUM_CLASSES:
            raise DataError(f"{labels_path}: label value {int(labels.max())} is not a digit class")
    except DataError as e:
        logger.error(f"Error loading IDX pair: {e}")
        raise

    images = (pixels.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    logger.info(f"Loaded {len(labels)} images of {pixels.shape[1]}x{pixels.shape[2]} from {images_path}")
    return Dataset(images=images, labels=labels.astype(np.int64))


def write_idx(dataset: Dataset, images_path: str, labels_path: str, compress: bool = False) -> None:
    """Write a Dataset back to an IDX pair; pixels are stored as round(255 * value)"""
    n, _, h, w = dataset.images.shape
    pixels = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    files = (
        (images_path, struct.pack('>IIII', IMAGES_MAGIC, n, h, w) + pixels.tobytes()),
        (labels_path, struct.pack('>II', LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()),
    )
    for path, raw in files:
        if compress:
            raw = gzip.compress(raw, mtime=0)
        with open(path, 'wb') as f:
            f.write(raw)
    logger.info(f"Wrote {n} images to {images_path}")


def make_batches(dataset: Dataset, batch_size: int, seed: int = 0,
                 shuffle: bool = True) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Split a dataset into batches; the last partial batch is kept

    Parameters:
    - dataset: Source data
    - batch_size: Images per batch (>= 1)
    - seed: Permutation seed, equal seeds give equal streams
    - shuffle: False keeps dataset order
    """
    return list(BatchPlan.create(len(dataset), batch_size, seed, shuffle).batches(dataset))


def _is_balanced(labels: np.ndarray, classes: np.ndarray) -> bool:
    share = len(labels) / len(classes)
    counts = np.array([np.sum(labels == c) for c in classes])
    return bool(np.all(np.abs(counts - share) <= BALANCE_TOLERANCE * share))


def _stratified(dataset: Dataset, count: int, classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    per_class = count // len(classes)
    chosen = []
    for c in classes:
        members = np.flatnonzero(dataset.labels == c)
        chosen.append(rng.choice(members, size=min(per_class, len(members)), replace=False))
    picked = np.concatenate(chosen)
    rest = np.setdiff1d(np.arange(len(dataset)), picked)
    extra = rng.choice(rest, size=count - len(picked), replace=False)
    return np.concatenate([picked, extra])


def subset(dataset: Dataset, count: int, seed: int = 0) -> Dataset:
    """
    Deterministic uniform sample without replacement, kept in dataset order

    For count >= 1000 the label histogram must be within 20% of uniform; draws that
    miss are redrawn, then a stratified draw is used as a last resort.
    """
    n = len(dataset)
    if count < 0 or count > n:
        raise ConfigError(f"Subset size {count} is outside [0, {n}]")
    if count == n:
        return dataset

    classes = np.unique(dataset.labels)
    for attempt in range(MAX_RESAMPLES):
        rng = np.random.default_rng([seed, attempt])
        indices = np.sort(rng.choice(n, size=count, replace=False))
        if count < BALANCE_MIN_COUNT or _is_balanced(dataset.labels[indices], classes):
            if attempt:
                logger.info(f"Subset of {count} balanced after {attempt + 1} draws")
            return dataset.take(indices)

    logger.warning(f"No balanced random subset of {count} after {MAX_RESAMPLES} draws, using stratified draw")
    indices = np.sort(_stratified(dataset, count, classes, np.random.default_rng([seed, MAX_RESAMPLES])))
    return dataset.take(indices)


@dataclass(frozen=True)
class MnistSplits:
    train: Dataset
    validation: Optional[Dataset]
    test: Dataset


def _find_file(data_dir: str, stem: str) -> str:
    candidates = [stem, stem + '.gz', stem.replace('-idx', '.idx'), stem.replace('-idx', '.idx') + '.gz']
    for name in candidates:
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    raise DataError(f"MNIST file {stem} (or .gz) not found in {data_dir}")


def load_mnist(data_dir: str, validation_size: int = 5000) -> MnistSplits:
    """
    Load the standard MNIST files from a local directory

    Parameters:
    - data_dir: Directory holding the four IDX files
    - validation_size: Trailing training images held out; skipped when the file holds fewer

    Returns:
    MnistSplits(train, validation, test)
    """
    paths = {key: _find_file(data_dir, stem) for key, stem in MNIST_FILES.items()}
    train = load_idx(paths['train_images'], paths['train_labels'])
    test = load_idx(paths['test_images'], paths['test_labels'])

    validation = None
    if 0 < validation_size < len(train):
        cut = len(train) - validation_size
        validation = train.take(np.arange(cut, len(train)))
        train = train.take(np.arange(cut))
    logger.info(f"MNIST splits: train {len(train)}, validation {0 if validation is None else len(validation)}, "
                f"test {len(test)}")
    return MnistSplits(train=train, validation=validation, test=test)
