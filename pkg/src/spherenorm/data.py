"""Desk-scale datasets, file ingestion (headerless CSV, IDX) and batching.

All datasets are returned feature-major: ``X`` is ``n_features x N`` and
``labels`` holds one integer class per column.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, SphereNormError
from .tensor import seeded_rng


class DatasetParseError(SphereNormError, ValueError):
    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.line = line
        self.offset = offset


@dataclass
class Dataset:
    X: np.ndarray
    labels: np.ndarray

    @property
    def n_features(self):
        return self.X.shape[0]

    @property
    def n_samples(self):
        return self.X.shape[1]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1

    def subset(self, idx):
        return Dataset(self.X[:, idx], self.labels[idx])

    def split(self, test_fraction, seed):
        """Deterministic shuffled train/test split."""
        order = seeded_rng(seed).permutation(self.n_samples)
        n_test = int(round(test_fraction * self.n_samples))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


def standardize_features(X):
    """Zero mean, unit variance per feature (row); constant rows are only centered."""
    mu = X.mean(axis=1, keepdims=True)
    sd = X.std(axis=1, keepdims=True)
    sd[sd == 0.0] = 1.0
    return (X - mu) / sd


def gaussian_blobs(n_samples=2560, n_features=32, n_classes=4, separation=4.0,
                   seed=0):
    """Isotropic unit-variance clusters whose centers are ``separation`` apart.

    Centers sit at ``separation / sqrt(2)`` along random orthonormal
    directions, so every pair of class means has distance ``separation``.
    """
    if n_classes > n_features:
        raise ConfigurationError("gaussian_blobs needs n_classes <= n_features")
    rng = seeded_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((n_features, n_classes)))
    centers = basis * (separation / np.sqrt(2.0))
    labels = np.arange(n_samples) % n_classes
    labels = labels[rng.permutation(n_samples)]
    X = centers[:, labels] + rng.standard_normal((n_features, n_samples))
    return Dataset(X, labels.astype(np.intp))


def two_spirals(n_samples=2048, noise=0.2, turns=1.5, n_features=2, seed=0):
    """Two interleaved spirals, optionally padded with pure-noise features."""
    rng = seeded_rng(seed)
    labels = np.arange(n_samples) % 2
    t = np.sqrt(rng.uniform(0.0, 1.0, n_samples)) * turns * 2 * np.pi
    sign = np.where(labels == 0, 1.0, -1.0)
    X = np.vstack([sign * t * np.cos(t), sign * t * np.sin(t)]) / (turns * 2 * np.pi)
    X = X + noise * rng.standard_normal(X.shape) / (turns * 2 * np.pi)
    if n_features > 2:
        X = np.vstack([X, noise * rng.standard_normal((n_features - 2, n_samples))])
    return Dataset(X, labels.astype(np.intp))


# ---------------------------------------------------------------------------
# headerless numeric CSV: one sample per line, label in the last column


def write_csv(path, dataset):
    with open(path, "w") as fh:
        for j in range(dataset.n_samples):
            values = [repr(float(v)) for v in dataset.X[:, j]]
            fh.write(",".join(values + [str(int(dataset.labels[j]))]) + "\n")


def read_csv(path, label_column=-1):
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            try:
                values = [float(f) for f in fields]
            except ValueError:
                bad = next(i for i, f in enumerate(fields) if not _is_float(f))
                raise DatasetParseError(f"column {bad + 1}: not a number: {fields[bad]!r}",
                                        path, line=lineno) from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DatasetParseError(f"expected {width} columns, got {len(values)}",
                                        path, line=lineno)
            rows.append(values)
    if not rows:
        raise DatasetParseError("no data rows", path)
    table = np.array(rows)
    labels = table[:, label_column]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise DatasetParseError("labels must be non-negative integers", path)
    X = np.delete(table, label_column % table.shape[1], axis=1).T
    return Dataset(np.ascontiguousarray(X), labels.astype(np.intp))


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# IDX: two zero bytes, a type code, the dimension count, big-endian uint32
# extents, then big-endian data

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def read_idx(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetParseError("truncated header", path, offset=len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise DatasetParseError("bad magic: first two bytes must be zero", path, offset=0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise DatasetParseError(f"unknown type code 0x{code:02x}", path, offset=2)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetParseError("truncated dimension list", path, offset=len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    dtype = np.dtype(_IDX_TYPES[code])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise DatasetParseError(
            f"payload has {len(raw) - header} bytes, dims need {expected}",
            path, offset=header)
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(
        dtype.newbyteorder("="))


def write_idx(path, array):
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.astype(np.dtype(_IDX_TYPES[code])).tobytes())


def read_idx_dataset(images_path, labels_path):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DatasetParseError("label count does not match image count", labels_path)
    X = images.reshape(images.shape[0], -1).astype(np.float64).T
    return Dataset(np.ascontiguousarray(X), labels.astype(np.intp))


# ---------------------------------------------------------------------------


DATASET_KINDS = ("gaussian_blobs", "two_spirals", "csv", "idx")


def make_dataset(kind, params=None, seed=0, standardize=True):
    params = dict(params or {})
    if kind == "gaussian_blobs":
        ds = gaussian_blobs(seed=seed, **params)
    elif kind == "two_spirals":
        ds = two_spirals(seed=seed, **params)
    elif kind == "csv":
        ds = read_csv(params["path"], params.get("label_column", -1))
    elif kind == "idx":
        ds = read_idx_dataset(params["images"], params["labels"])
    else:
        raise ConfigurationError(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")
    if standardize:
        ds = Dataset(standardize_features(ds.X), ds.labels)
    return ds


def unused_per_epoch(n_samples, batch_size, drop_last=True):
    return n_samples % batch_size if drop_last else 0


def batch_iter(X, labels, batch_size, seed, epoch=0, drop_last=True):
    """Yield shuffled ``(X_batch, labels_batch)`` pairs for one epoch.

    The shuffle is seeded by ``(seed, epoch)``. With ``drop_last`` the short
    final batch is skipped so every batch has exactly ``batch_size`` columns.
    """
    N = X.shape[1]
    if batch_size > N:
        raise ConfigurationError(f"batch size {batch_size} exceeds {N} samples")
    if batch_size < 1:
        raise ConfigurationError("batch size must be positive")
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(N)
    stop = N - unused_per_epoch(N, batch_size, drop_last)
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield X[:, idx], labels[idx]
