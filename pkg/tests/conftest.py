"""Shared fixtures: small real image data and IDX fixture files."""

import os
from pathlib import Path

import numpy as np
import pytest

from dcgmm.data import LabeledDataset, load_idx, save_idx
from dcgmm.tensor import Tensor4

MNIST_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_paths():
    root = Path(os.environ.get("DCGMM_DATA_DIR", "data"))
    paths = {k: root / v for k, v in MNIST_NAMES.items()}
    if all(p.is_file() for p in paths.values()):
        return paths
    return None


@pytest.fixture(scope="session")
def mnist():
    """Full MNIST train/test pair; skips when the IDX files are absent."""
    paths = mnist_paths()
    if paths is None:
        pytest.skip("MNIST IDX files not found; place them under $DCGMM_DATA_DIR "
                    "(no dataset download is possible in this build environment)")
    train = load_idx(paths["train_images"], paths["train_labels"], name="mnist-train")
    test = load_idx(paths["test_images"], paths["test_labels"], name="mnist-test")
    return train, test


@pytest.fixture(scope="session")
def digits():
    """Bundled 8x8 handwritten digits (10 classes), split 90/10."""
    sklearn_datasets = pytest.importorskip("sklearn.datasets")
    raw = sklearn_datasets.load_digits()
    samples = Tensor4(raw.images.reshape(-1, 8, 8, 1) / 16.0)
    ds = LabeledDataset(samples, raw.target.astype(np.int64), 10, name="digits")
    rng = np.random.default_rng(7)
    order = rng.permutation(len(ds))
    cut = int(round(len(ds) * 0.9))
    return ds.subset(order[:cut]), ds.subset(order[cut:])


@pytest.fixture()
def idx_fixture(tmp_path, digits):
    """Digits written out as IDX files; returns the four paths."""
    train, test = digits
    paths = {
        "train_images": tmp_path / "train-images.idx",
        "train_labels": tmp_path / "train-labels.idx",
        "test_images": tmp_path / "test-images.idx",
        "test_labels": tmp_path / "test-labels.idx",
    }
    save_idx(train, paths["train_images"], paths["train_labels"])
    save_idx(test, paths["test_images"], paths["test_labels"])
    return paths
