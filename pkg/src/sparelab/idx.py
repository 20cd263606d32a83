"""Reader and writer for the MNIST IDX container.

Layout (big endian): u32 magic ``0x000008NN`` where ``08`` marks unsigned
bytes and ``NN`` is the number of dimensions, then one u32 per dimension,
then the row-major payload.
"""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

LABELS_MAGIC = 0x00000801
IMAGES_MAGIC = 0x00000803
SUPPORTED_MAGIC = {LABELS_MAGIC: 1, IMAGES_MAGIC: 3}

# Refuse to allocate more than this many payload bytes from a header.
MAX_PAYLOAD = 1 << 34


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxHeaderError(IdxError):
    pass


class IdxPayloadError(IdxError):
    """Payload length disagrees with the product of the declared dimensions."""


class IdxTruncatedError(IdxPayloadError):
    pass


class IdxDimensionError(IdxError):
    pass


def parse_idx(data: bytes) -> tuple[tuple[int, ...], np.ndarray]:
    """Parse an IDX byte string into ``(shape, uint8 array)``."""
    if len(data) < 4:
        raise IdxHeaderError(f"need 4 bytes of magic, got {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in SUPPORTED_MAGIC:
        raise IdxMagicError(f"unsupported magic 0x{magic:08x}")
    ndim = SUPPORTED_MAGIC[magic]
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxHeaderError(f"header needs {header_len} bytes, got {len(data)}")
    shape = struct.unpack(f">{ndim}I", data[4:header_len])
    total = 1
    for dim in shape:
        total *= dim
        if total > MAX_PAYLOAD:
            raise IdxDimensionError(f"declared shape {shape} exceeds {MAX_PAYLOAD} bytes")
    payload = memoryview(data)[header_len:]
    if len(payload) < total:
        raise IdxTruncatedError(f"payload has {len(payload)} bytes, shape {shape} needs {total}")
    if len(payload) > total:
        raise IdxPayloadError(f"payload has {len(payload)} bytes, shape {shape} needs only {total}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()
    return tuple(int(s) for s in shape), arr


def write_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise IdxError(f"only uint8 arrays are supported, got {arr.dtype}")
    magic = {1: LABELS_MAGIC, 3: IMAGES_MAGIC}.get(arr.ndim)
    if magic is None:
        raise IdxDimensionError(f"only 1-D labels or 3-D images are supported, got ndim={arr.ndim}")
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def read_idx_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return parse_idx(raw)[1]


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(
        f"{stem} not found in {directory}. Download the four MNIST IDX files "
        "(train/t10k images and labels, optionally gzipped) into that directory."
    )


def load_mnist(directory: str | Path, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Load official MNIST IDX files from ``directory``."""
    directory = Path(directory)
    img_stem, lab_stem = MNIST_FILES[split]
    images = read_idx_file(_find(directory, img_stem))
    labels = read_idx_file(_find(directory, lab_stem))
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise IdxError(f"mismatched MNIST files: images {images.shape}, labels {labels.shape}")
    return images, labels


def load_bundled_mnist() -> tuple[np.ndarray, np.ndarray]:
    """The 5000-digit MNIST sample that ships inside mlxtend (500 per digit).

    Used when the official IDX files are not available offline.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    return X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8)
