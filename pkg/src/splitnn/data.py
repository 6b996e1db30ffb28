"""Dataset ingestion (MNIST IDX, CIFAR binary, CSV, synthetic) and partitioning."""

from __future__ import annotations

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .engine import ClientData

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_ROW = 1 + 3072


@dataclass
class Samples:
    features: np.ndarray  # [N, D] or [N, C, H, W], float32
    labels: np.ndarray  # [N], int64

    def __len__(self):
        return len(self.labels)

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(repr(self.features.shape).encode())
        h.update(np.ascontiguousarray(self.features, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def read_idx(path, expect_magic):
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DatasetError(f"{path}: file too short for an IDX header (offset 0)")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expect_magic:
        raise DatasetError(f"{path}: bad IDX magic 0x{magic:08x} at offset 0, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: truncated IDX dimension block at offset 4")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    start = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(raw) - start != count:
        raise DatasetError(f"{path}: IDX dims {dims} need {count} data bytes from offset {start}, "
                           f"found {len(raw) - start}")
    return np.frombuffer(raw, dtype=np.uint8, offset=start).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"dim mismatch: {images_path} holds {images.shape[0]} images but "
                           f"{labels_path} holds {labels.shape[0]} labels (count field at offset 4)")
    features = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Samples(features, labels.astype(np.int64))


def write_idx(path, array, magic):
    """Write ``array`` (uint8) as an IDX file; the inverse of :func:`read_idx`."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_cifar_bin(path):
    raw = _read_bytes(path)
    if len(raw) % CIFAR_ROW:
        full = len(raw) // CIFAR_ROW * CIFAR_ROW
        raise DatasetError(f"{path}: trailing partial record at offset {full} ({CIFAR_ROW}-byte records)")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_ROW)
    labels = rows[:, 0].astype(np.int64)
    features = rows[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return Samples(features, labels)


def load_csv(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    rows, labels = [], []
    width = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                bad = next(c for c in row if not _is_number(c))
                raise DatasetError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} columns, got {len(values)}")
            if values[-1] != int(values[-1]) or values[-1] < 0:
                raise DatasetError(f"{path}:{lineno}: label {values[-1]!r} is not a class index")
            rows.append(values[:-1])
            labels.append(int(values[-1]))
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return Samples(np.asarray(rows, dtype=np.float32), np.asarray(labels, dtype=np.int64))


def _is_number(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def synthetic(n, dims, classes, seed, spread=3.0):
    """Gaussian class blobs: unit-variance noise around per-class centres."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(scale=spread, size=(classes, dims))
    labels = rng.integers(0, classes, size=n)
    features = centres[labels] + rng.normal(size=(n, dims))
    return Samples(features.astype(np.float32), labels.astype(np.int64))


def load_dataset(source: dict) -> Samples:
    """Load one dataset. ``source['kind']`` picks the loader; optional keys
    ``keep_classes`` (relabelled to 0..k-1 in the given order), ``limit``
    and ``flatten`` post-process the samples."""
    kind = source.get("kind")
    if kind == "synthetic":
        s = synthetic(int(source["n"]), int(source["dims"]), int(source["classes"]),
                      int(source.get("seed", 0)), float(source.get("spread", 3.0)))
    elif kind == "mnist_idx":
        s = load_mnist_idx(source["images"], source["labels"])
    elif kind == "cifar_bin":
        s = load_cifar_bin(source["path"])
    elif kind == "csv":
        s = load_csv(source["path"])
    else:
        raise DatasetError(f"unknown dataset kind {kind!r}")
    keep = source.get("keep_classes")
    if keep:
        keep = [int(k) for k in keep]
        mask = np.isin(s.labels, keep)
        remap = {k: i for i, k in enumerate(keep)}
        s = Samples(s.features[mask], np.array([remap[int(v)] for v in s.labels[mask]], dtype=np.int64))
    limit = source.get("limit")
    if limit:
        s = Samples(s.features[:int(limit)], s.labels[:int(limit)])
    if source.get("flatten"):
        s = Samples(np.ascontiguousarray(s.features.reshape(len(s.features), -1)), s.labels)
    return s


def partition_dataset(samples: Samples, spec: dict, seed: int):
    """Split samples into per-client shards.

    ``spec['kind']`` is ``horizontal`` (``num_clients``, ``strategy`` equal or
    dirichlet with ``alpha``) or ``vertical`` (``feature_widths``). Vertical
    shards keep row order; only the first shard carries labels.
    """
    kind = spec.get("kind", "horizontal")
    n = len(samples)
    if kind == "vertical":
        widths = [int(w) for w in spec["feature_widths"]]
        if samples.features.ndim != 2:
            raise DatasetError("vertical partitioning needs [N, D] features (set flatten)")
        if sum(widths) != samples.features.shape[1]:
            raise DatasetError(f"feature_widths {widths} sum to {sum(widths)}, "
                               f"dataset has {samples.features.shape[1]} features")
        shards, lo = [], 0
        for i, w in enumerate(widths):
            cols = np.ascontiguousarray(samples.features[:, lo:lo + w])
            shards.append(ClientData(cols, samples.labels if i == 0 else None))
            lo += w
        return shards

    k = int(spec.get("num_clients", 1))
    if k < 1:
        raise DatasetError("num_clients must be >= 1")
    if k > n:
        raise DatasetError(f"{k} clients but only {n} samples")
    rng = np.random.default_rng(seed)
    strategy = spec.get("strategy", "equal")
    if strategy == "equal":
        parts = np.array_split(rng.permutation(n), k)
    elif strategy == "dirichlet":
        alpha = float(spec.get("alpha", 0.5))
        buckets = [[] for _ in range(k)]
        for c in np.unique(samples.labels):
            idx = rng.permutation(np.flatnonzero(samples.labels == c))
            props = rng.dirichlet(np.full(k, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for i, piece in enumerate(np.split(idx, cuts)):
                buckets[i].extend(piece.tolist())
        parts = [rng.permutation(np.asarray(b, dtype=np.int64)) for b in buckets]
    else:
        raise DatasetError(f"unknown partition strategy {strategy!r}")
    return [ClientData(np.ascontiguousarray(samples.features[p]), samples.labels[p]) for p in parts]
