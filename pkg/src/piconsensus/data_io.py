"""IDX binary ingestion, binary-label filtering, sharding, synthetic data.

The IDX layout (the MNIST container format) is: two zero magic bytes, a
dtype code, the number of dimensions, that many big-endian uint32 sizes,
then the row-major payload.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IdxFormatError(ValueError):
    """Malformed IDX byte stream."""


class IdxBadMagicError(IdxFormatError):
    """Header bytes 0-1 are not zero."""


class IdxUnknownDtypeError(IdxFormatError):
    """Unrecognized dtype code in header byte 2."""


class IdxTruncatedError(IdxFormatError):
    """Byte stream shorter than the header demands."""


@dataclass
class IdxTensor:
    """Decoded IDX tensor: dtype code, dimension sizes, and the payload array."""

    dtype_code: int
    dims: tuple[int, ...]
    data: np.ndarray


def parse_idx(buf):
    """Decode an IDX byte stream into an IdxTensor.

    Raises IdxBadMagicError / IdxUnknownDtypeError / IdxTruncatedError for
    the three failure modes; trailing bytes beyond the declared payload are
    also rejected.
    """
    buf = bytes(buf)
    if len(buf) < 4:
        raise IdxTruncatedError(f"need at least 4 header bytes, got {len(buf)}")
    if buf[0] != 0 or buf[1] != 0:
        raise IdxBadMagicError(f"magic bytes must be 00 00, got {buf[0]:02x} {buf[1]:02x}")
    dtype_code, ndims = buf[2], buf[3]
    if dtype_code not in IDX_DTYPES:
        raise IdxUnknownDtypeError(f"unknown dtype code 0x{dtype_code:02x}")
    header_len = 4 + 4 * ndims
    if len(buf) < header_len:
        raise IdxTruncatedError(f"header declares {ndims} dims but stream has {len(buf)} bytes")
    dims = struct.unpack(f">{ndims}I", buf[4:header_len])
    dtype = IDX_DTYPES[dtype_code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    expected = header_len + count * dtype.itemsize
    if len(buf) < expected:
        raise IdxTruncatedError(f"payload needs {expected - header_len} bytes, "
                                f"got {len(buf) - header_len}")
    if len(buf) > expected:
        raise IdxFormatError(f"{len(buf) - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=header_len)
    data = data.astype(dtype.newbyteorder("=")).reshape(dims)
    return IdxTensor(dtype_code=dtype_code, dims=tuple(int(s) for s in dims), data=data)


def serialize_idx(tensor):
    """Encode an IdxTensor back to IDX bytes (inverse of parse_idx)."""
    dims = tensor.dims
    if len(dims) > 255:
        raise IdxFormatError("IDX supports at most 255 dimensions")
    if tensor.dtype_code not in IDX_DTYPES:
        raise IdxUnknownDtypeError(f"unknown dtype code 0x{tensor.dtype_code:02x}")
    header = struct.pack(f">BBBB{len(dims)}I", 0, 0, tensor.dtype_code, len(dims), *dims)
    payload = np.ascontiguousarray(tensor.data, dtype=IDX_DTYPES[tensor.dtype_code]).tobytes()
    return header + payload


def load_idx(path):
    """Read an IDX file from disk, transparently handling gzip."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


@dataclass
class Dataset:
    """Feature rows in [0,1] (plus a trailing bias column) and binary labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature and label counts differ")
        if self.features.shape[0] == 0:
            raise ValueError("empty dataset")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]


def filter_binary(images, labels, digit_a, digit_b):
    """Binary classification subset: keep two classes, relabel to 0/1.

    Pixels are scaled by 1/255 and a constant-1 bias feature is appended, so
    a single weight vector covers the intercept too.
    """
    if digit_a == digit_b:
        raise ValueError("the two classes must differ")
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels are not aligned")
    keep = np.isin(labels, (digit_a, digit_b))
    if not np.any(keep):
        raise ValueError(f"no samples with label {digit_a} or {digit_b}")
    rows = images[keep].reshape(int(keep.sum()), -1).astype(float) / 255.0
    bias = np.ones((rows.shape[0], 1))
    features = np.hstack([rows, bias])
    binary = (labels[keep] == digit_b).astype(int)
    return Dataset(features=features, labels=binary)


def partition(dataset, m, seed):
    """Split into m near-equal shards after a seeded shuffle.

    Deterministic: the same seed always yields identical shards.  Shard
    sizes differ by at most one, larger shards first.
    """
    if dataset.n < m:
        raise ValueError(f"cannot split {dataset.n} samples among {m} agents")
    order = np.random.default_rng(seed).permutation(dataset.n)
    shards = []
    for idx in np.array_split(order, m):
        shards.append(Dataset(features=dataset.features[idx], labels=dataset.labels[idx]))
    return shards


def synthetic_logistic(n, d, separation, seed, scale_spread=1.0):
    """Two Gaussian clouds at +/- separation * u along a random unit direction.

    ``scale_spread`` > 1 stretches the feature axes geometrically from 1 up
    to that factor, which drives the Hessian condition number up and makes
    pre-conditioning worth demonstrating.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    labels = rng.integers(0, 2, size=n)
    signs = 2.0 * labels - 1.0
    features = rng.normal(size=(n, d)) + separation * signs[:, None] * u[None, :]
    if scale_spread != 1.0:
        features *= np.geomspace(1.0, scale_spread, d)[None, :]
    return Dataset(features=features, labels=labels)
