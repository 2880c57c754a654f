import os
import sys
import tempfile

# Loggers are created at import time, so the log directory must be set first
os.environ.setdefault('RP_LOG_DIR', tempfile.mkdtemp(prefix='rp_logs_'))

# Add parent directory to path to allow imports from code/
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from dataio import Dataset, write_idx
from model import ModelSpec

MNIST_DIR = os.environ.get('RP_MNIST_DIR')


def pytest_collection_modifyitems(config, items):
    if MNIST_DIR:
        return
    skip = pytest.mark.skip(reason="RP_MNIST_DIR not set")
    for item in items:
        if 'mnist' in item.keywords:
            item.add_marker(skip)


def digit_like(count: int, seed: int = 0, size: int = 12) -> Dataset:
    """
    Separable synthetic images: class c lights a bar whose position depends on c

    Background noise stays below 0.2 so every class is learnable by a small network.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 10
    rng.shuffle(labels)
    images = rng.uniform(0.0, 0.2, size=(count, 1, size, size)).astype(np.float32)
    for index, label in enumerate(labels):
        row = (label % 5) * (size // 5)
        if label < 5:
            images[index, 0, row:row + 2, :] = 1.0
        else:
            images[index, 0, :, row:row + 2] = 1.0
    images = np.rint(images * 255.0) / np.float32(255.0)
    return Dataset(images=images.astype(np.float32), labels=labels.astype(np.int64))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    return digit_like(60, seed=3)


@pytest.fixture
def tiny_spec():
    """Small conv net for 12x12 inputs with k = 15 channels"""
    return ModelSpec(input_height=12, input_width=12, input_channels=15, conv1_filters=2,
                     conv2_filters=3, kernel_size=3, dense_units=8, profile_name='test')


@pytest.fixture
def idx_pair(tmp_path):
    """Write a dataset as an IDX pair and return (dataset, images path, labels path)"""
    def write(dataset: Dataset, compress: bool = False):
        suffix = '.gz' if compress else ''
        images_path = str(tmp_path / f'images-idx3-ubyte{suffix}')
        labels_path = str(tmp_path / f'labels-idx1-ubyte{suffix}')
        write_idx(dataset, images_path, labels_path, compress=compress)
        return images_path, labels_path
    return write
