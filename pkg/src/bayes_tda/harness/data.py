"""Synthetic Gaussian blobs and IDX (MNIST-style) ingestion."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import MalformedIdx
from ..model import WeightedDataset
from ..numeric import RngStream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# IDX type code -> big-endian numpy dtype
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_DTYPE_CODES = {v: k for k, v in _IDX_DTYPES.items()}


@dataclass(frozen=True)
class TestSet:
    __test__ = False  # not a pytest class

    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i):
        return self.features[i], int(self.labels[i])


@dataclass(frozen=True)
class BlobsConfig:
    classes: int = 3
    train_per_class: int = 10
    test_per_class: int = 10
    dim: int = 2
    separation: float = 3.0
    sigma: float = 1.0
    data_seed: int = 0
    # totals override the per-class counts; labels then cycle 0, 1, ..., C-1
    train_size: int = 0
    test_size: int = 0


def blob_centers(classes: int, dim: int, separation: float) -> np.ndarray:
    """Regular polygon in the first two coordinates; adjacent centers sit exactly ``separation`` apart."""
    radius = separation / (2.0 * math.sin(math.pi / classes))
    angles = 2.0 * math.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def _draw(centers, per_class, total, sigma, gen):
    C, d = centers.shape
    labels = np.arange(total) % C if total else np.repeat(np.arange(C), per_class)
    feats = centers[labels] + sigma * gen.standard_normal((labels.size, d))
    return feats, labels


def generate_blobs(config: BlobsConfig) -> tuple[WeightedDataset, TestSet]:
    """Gaussian class clusters around a regular polygon of centers.

    With per-class counts the samples are grouped by class. With totals the
    labels cycle, and a smaller total is an exact prefix of a larger one for
    the same seed, so size sweeps use nested datasets.
    """
    if config.classes < 2 or config.dim < 2:
        raise ValueError("blobs need classes >= 2 and dim >= 2")
    centers = blob_centers(config.classes, config.dim, config.separation)
    train_x, train_y = _draw(centers, config.train_per_class, config.train_size, config.sigma,
                             RngStream(config.data_seed, 1).generator())
    test_x, test_y = _draw(centers, config.test_per_class, config.test_size, config.sigma,
                           RngStream(config.data_seed, 2).generator())
    train = WeightedDataset(train_x, train_y, num_classes=config.classes)
    return train, TestSet(test_x, test_y)


def subsample_per_class(data: WeightedDataset, per_class: int) -> WeightedDataset:
    """First ``per_class`` samples of each class, preserving order (nested across sizes)."""
    keep = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size < per_class:
            raise ValueError(f"class {c} has {idx.size} samples, need {per_class}")
        keep.extend(idx[:per_class])
    keep = np.sort(np.array(keep))
    return WeightedDataset(data.features[keep], data.labels[keep], data.loss_weights[keep], data.num_classes)


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------

def parse_idx(blob: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Decode an IDX container (big-endian header, row-major payload)."""
    if len(blob) < 4:
        raise MalformedIdx("file shorter than the 4-byte magic")
    zero, type_code, ndim = struct.unpack(">HBB", blob[:4])
    magic = (type_code << 8) | ndim
    if zero != 0 or type_code not in _IDX_DTYPES or ndim == 0:
        raise MalformedIdx(f"bad magic 0x{int.from_bytes(blob[:4], 'big'):08x}")
    if expected_magic is not None and magic != expected_magic:
        raise MalformedIdx(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise MalformedIdx("truncated dimension header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    dtype = _IDX_DTYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = blob[header:]
    if len(payload) < expected:
        raise MalformedIdx(f"truncated payload: {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise MalformedIdx(f"{len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    """Inverse of ``parse_idx``."""
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder(">")
    code = _DTYPE_CODES.get(dtype)
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    head = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + array.astype(dtype).tobytes()


def read_idx_images(path: str | Path) -> np.ndarray:
    arr = parse_idx(Path(path).read_bytes(), IMAGE_MAGIC)
    if arr.ndim != 3:
        raise MalformedIdx("image file must have 3 dimensions")
    return arr


def read_idx_labels(path: str | Path, num_classes: int = 10) -> np.ndarray:
    arr = parse_idx(Path(path).read_bytes(), LABEL_MAGIC)
    if np.any(arr >= num_classes):
        raise MalformedIdx(f"label {int(arr.max())} out of range for {num_classes} classes")
    return arr.astype(np.int64)


def downscale(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool ``(n, h, w)`` images by ``factor``; trailing rows/cols that do not fill a block are cropped."""
    if factor <= 1:
        return images
    n, h, w = images.shape
    h2, w2 = h // factor, w // factor
    cropped = images[:, :h2 * factor, :w2 * factor]
    return cropped.reshape(n, h2, factor, w2, factor).mean(axis=(2, 4))


def load_idx(
    image_path: str | Path,
    label_path: str | Path,
    per_class: int,
    downscale_factor: int = 1,
    seed: int = 0,
    classes: list[int] | None = None,
    test_per_class: int | None = None,
    num_classes: int = 10,
) -> tuple[WeightedDataset, TestSet]:
    """Load, normalize to [0, 1], pool, and draw disjoint per-class train/test subsets.

    ``classes`` selects and relabels a subset of digits (e.g. ``[0, 1, 2]``).
    """
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path, num_classes)
    if images.shape[0] != labels.shape[0]:
        raise MalformedIdx(f"{images.shape[0]} images but {labels.shape[0]} labels")
    scale = 255.0 if images.dtype.kind in "ui" else 1.0
    pixels = downscale(images.astype(np.float64) / scale, downscale_factor)
    flat = pixels.reshape(pixels.shape[0], -1)
    classes = sorted(set(labels.tolist())) if classes is None else list(classes)
    test_per_class = per_class if test_per_class is None else test_per_class
    gen = RngStream(seed, 3).generator()
    tr, te = [], []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        need = per_class + test_per_class
        if idx.size < need:
            raise ValueError(f"class {c} has {idx.size} samples, need {need}")
        chosen = np.sort(gen.choice(idx, size=need, replace=False))
        chosen = gen.permutation(chosen)
        tr.extend(chosen[:per_class])
        te.extend(chosen[per_class:])
    remap = {c: k for k, c in enumerate(classes)}
    tr, te = np.array(tr), np.array(te)
    train = WeightedDataset(flat[tr], np.array([remap[int(l)] for l in labels[tr]]), num_classes=len(classes))
    test = TestSet(flat[te], np.array([remap[int(l)] for l in labels[te]]))
    return train, test
