"""MNIST ingestion: the classic big-endian IDX files, plain or gzipped."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

__all__ = ["LabeledImages", "MnistError", "load_mnist", "default_data_dir"]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class MnistError(IOError):
    """Missing, truncated, or malformed IDX file."""


@dataclass
class LabeledImages:
    """Pixel values are scaled to [0, 1] (uint8 / 255)."""

    train_images: np.ndarray  # (N, 28, 28) float32
    train_labels: np.ndarray  # (N,) int64
    test_images: np.ndarray
    test_labels: np.ndarray


def _open(path: str):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _resolve(directory: str, stem: str) -> str:
    for candidate in (stem, stem + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise MnistError(f"missing MNIST file {stem}[.gz] in {directory}")


def _read_exact(fh, count: int, path: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise MnistError(f"truncated IDX file {path}: wanted {count} bytes, got {len(data)}")
    return data


def read_idx_images(path: str) -> np.ndarray:
    with _open(path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, path))
        if magic != IMAGE_MAGIC:
            raise MnistError(f"bad magic {magic:#010x} in image file {path}")
        raw = _read_exact(fh, count * rows * cols, path)
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path: str) -> np.ndarray:
    with _open(path) as fh:
        magic, count = struct.unpack(">II", _read_exact(fh, 8, path))
        if magic != LABEL_MAGIC:
            raise MnistError(f"bad magic {magic:#010x} in label file {path}")
        raw = _read_exact(fh, count, path)
    return np.frombuffer(raw, dtype=np.uint8)


def load_mnist(directory: str) -> LabeledImages:
    """Parse the four IDX files under `directory` (gzip accepted)."""
    paths = {k: _resolve(directory, stem) for k, stem in FILES.items()}
    train_x = read_idx_images(paths["train_images"])
    train_y = read_idx_labels(paths["train_labels"])
    test_x = read_idx_images(paths["test_images"])
    test_y = read_idx_labels(paths["test_labels"])
    for x, y, which in ((train_x, train_y, "train"), (test_x, test_y, "test")):
        if x.shape[0] != y.shape[0]:
            raise MnistError(
                f"{which} image/label count mismatch in {paths[which + '_images']}: "
                f"{x.shape[0]} images vs {y.shape[0]} labels")
    return LabeledImages(
        train_images=(train_x.astype(np.float32) / 255.0),
        train_labels=train_y.astype(np.int64),
        test_images=(test_x.astype(np.float32) / 255.0),
        test_labels=test_y.astype(np.int64),
    )


def default_data_dir() -> str | None:
    """DTNN_DATA_DIR, or ./data/mnist relative to the working tree."""
    env = os.environ.get("DTNN_DATA_DIR")
    if env:
        return env
    here = os.path.join(os.getcwd(), "data", "mnist")
    if os.path.isdir(here):
        return here
    return None
