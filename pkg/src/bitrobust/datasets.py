"""IDX (MNIST distribution format) reading and writing."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse(data: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(data) < 4 + 4 * ndim:
        raise IdxError(f"{what}: truncated header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxError(f"{what}: magic mismatch, expected 0x{magic:08x}, found 0x{found:08x}")
    shape = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    count = int(np.prod(shape))
    body = data[4 + 4 * ndim:]
    if len(body) < count:
        raise IdxError(f"{what}: truncated, expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(shape)


def read_idx_images(path) -> np.ndarray:
    return _parse(_read_bytes(path), IMAGES_MAGIC, 3, str(path))


def read_idx_labels(path) -> np.ndarray:
    return _parse(_read_bytes(path), LABELS_MAGIC, 1, str(path))


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as ``(n, rows*cols)`` floats in [0, 1] and integer labels."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.reshape(images.shape[0], -1) / 255.0, labels.astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">IIII", IMAGES_MAGIC, *images.shape)
    _write(path, header + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    _write(path, struct.pack(">II", LABELS_MAGIC, labels.size) + labels.tobytes())


def _write(path, data: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the output byte-stable
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


@dataclass
class DatasetBundle:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @classmethod
    def from_idx(cls, train_images, train_labels, test_images, test_labels, n_train=None, n_test=None):
        x_train, y_train = load_idx(train_images, train_labels)
        x_test, y_test = load_idx(test_images, test_labels)
        return cls(x_train[:n_train], y_train[:n_train], x_test[:n_test], y_test[:n_test])
