import gzip
import os
import struct

import numpy as np
import pytest

from dtnn.mnist import (IMAGE_MAGIC, LABEL_MAGIC, MnistError, default_data_dir,
                        load_mnist, read_idx_images)

REAL_DATA = os.path.join(os.path.dirname(__file__), "..", "data", "mnist")


def write_images(path, images: np.ndarray, magic=IMAGE_MAGIC, truncate=0):
    n, r, c = images.shape
    blob = struct.pack(">IIII", magic, n, r, c) + images.astype(np.uint8).tobytes()
    if truncate:
        blob = blob[:-truncate]
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(blob)


def write_labels(path, labels: np.ndarray, magic=LABEL_MAGIC):
    blob = struct.pack(">II", magic, labels.shape[0]) + labels.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


@pytest.fixture
def tiny_dir(tmp_path):
    rng = np.random.default_rng(0)
    train_x = rng.integers(0, 256, size=(32, 28, 28))
    test_x = rng.integers(0, 256, size=(8, 28, 28))
    write_images(str(tmp_path / "train-images-idx3-ubyte"), train_x)
    write_labels(str(tmp_path / "train-labels-idx1-ubyte"),
                 rng.integers(0, 10, size=32))
    write_images(str(tmp_path / "t10k-images-idx3-ubyte.gz"), test_x)
    write_labels(str(tmp_path / "t10k-labels-idx1-ubyte"),
                 rng.integers(0, 10, size=8))
    return tmp_path


def test_loads_plain_and_gzip(tiny_dir):
    data = load_mnist(str(tiny_dir))
    assert data.train_images.shape == (32, 28, 28)
    assert data.test_images.shape == (8, 28, 28)
    assert data.train_images.dtype == np.float32
    assert 0.0 <= data.train_images.min() and data.train_images.max() <= 1.0


def test_pixels_scaled_by_255(tiny_dir):
    raw = read_idx_images(str(tiny_dir / "train-images-idx3-ubyte"))
    data = load_mnist(str(tiny_dir))
    assert np.allclose(data.train_images, raw.astype(np.float32) / 255.0)


def test_missing_file_names_the_stem(tmp_path):
    with pytest.raises(MnistError, match="train-images-idx3-ubyte"):
        load_mnist(str(tmp_path))


def test_bad_magic_names_the_file(tiny_dir):
    bad = tiny_dir / "train-images-idx3-ubyte"
    write_images(str(bad), np.zeros((4, 28, 28)), magic=0xDEADBEEF)
    with pytest.raises(MnistError, match="bad magic.*train-images"):
        load_mnist(str(tiny_dir))


def test_truncated_file_rejected(tiny_dir):
    write_images(str(tiny_dir / "train-images-idx3-ubyte"),
                 np.zeros((4, 28, 28)), truncate=10)
    with pytest.raises(MnistError, match="truncated"):
        load_mnist(str(tiny_dir))


def test_count_mismatch_rejected(tiny_dir):
    write_labels(str(tiny_dir / "train-labels-idx1-ubyte"), np.zeros(31))
    with pytest.raises(MnistError, match="mismatch"):
        load_mnist(str(tiny_dir))


def test_env_var_dir_takes_priority(tmp_path, monkeypatch):
    monkeypatch.setenv("DTNN_DATA_DIR", str(tmp_path))
    assert default_data_dir() == str(tmp_path)


@pytest.mark.skipif(not os.path.isdir(REAL_DATA), reason="MNIST corpus not present")
def test_real_mnist_shapes():
    data = load_mnist(REAL_DATA)
    assert data.train_images.shape == (60000, 28, 28)
    assert data.test_images.shape == (10000, 28, 28)
    assert set(np.unique(data.train_labels)) == set(range(10))
