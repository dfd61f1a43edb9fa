"""Datasets (IDX reader, Gaussian mixture generator, CSV) and Dirichlet client partitioning.

All randomness comes from ``numpy.random.Generator(PCG64(seed))``.
"""

from __future__ import annotations

import csv
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigError, FormatError, InputError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PathLike = Union[str, Path]


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InputError("features must be (examples x dim) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 20
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("Dirichlet alpha must be positive")


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    example_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.example_indices)


def _largest_remainder(n: int, proportions: np.ndarray) -> np.ndarray:
    raw = proportions * n
    counts = np.floor(raw).astype(np.int64)
    residue = n - int(counts.sum())
    if residue > 0:
        # stable sort so ties go to the lower client id
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:residue]] += 1
    return counts


def dirichlet_partition(dataset: LabeledDataset, config: PartitionConfig) -> list[ClientShard]:
    """Split every class across clients with proportions p_k ~ Dir_N(alpha).

    Classes are processed in ascending order. For each class the example indices
    are shuffled, proportions are drawn as normalized Gamma(alpha, 1) variates,
    counts are floor(p * n_k) with the residue going to the largest fractional
    remainders, and the shuffled indices are cut into consecutive runs.
    """
    hist = dataset.histogram()
    empty = np.flatnonzero(hist == 0)
    if empty.size:
        raise InputError(f"classes without examples: {empty.tolist()}")

    rng = np.random.Generator(np.random.PCG64(config.seed))
    n = config.num_clients
    buckets: list[list[np.ndarray]] = [[] for _ in range(n)]
    for k in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == k))
        draws = rng.gamma(config.alpha, 1.0, size=n)
        total = draws.sum()
        if not total > 0:
            # every draw underflowed (tiny alpha): the whole class goes to one client
            draws = np.zeros(n)
            draws[rng.integers(n)] = 1.0
            total = 1.0
        counts = _largest_remainder(idx.size, draws / total)
        for client, piece in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[client].append(piece)

    shards = []
    for client, pieces in enumerate(buckets):
        indices = np.sort(np.concatenate(pieces)) if pieces else np.zeros(0, dtype=np.int64)
        shards.append(ClientShard(client, indices.astype(np.int64)))
    empty_clients = [s.client_id for s in shards if len(s) == 0]
    if empty_clients:
        log.warning("clients with zero examples after partitioning: %s", empty_clients)
    return shards


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path: PathLike, expected_magic: int, ndim: int) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        blob = fh.read()
    header_len = 4 + 4 * ndim
    if len(blob) < 4:
        raise FormatError("file too short for an IDX magic number", 0, str(path))
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0, str(path))
    if len(blob) < header_len:
        raise FormatError("truncated IDX header", len(blob), str(path))
    dims = struct.unpack(">" + "I" * ndim, blob[4:header_len])
    expected = int(np.prod(dims))
    payload = len(blob) - header_len
    if payload < expected:
        raise FormatError(f"truncated payload: {payload} of {expected} bytes", len(blob), str(path))
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes", header_len + expected, str(path))
    return np.frombuffer(blob, dtype=np.uint8, offset=header_len).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4, str(labels_path))
    if labels.size and labels.max() >= num_classes:
        bad = int(np.flatnonzero(labels >= num_classes)[0])
        raise FormatError(f"label {labels[bad]} >= {num_classes}", 8 + bad, str(labels_path))
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), num_classes)


def write_idx_images(path: PathLike, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    payload = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    _write_maybe_gzip(Path(path), payload)


def write_idx_labels(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    payload = struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()
    _write_maybe_gzip(Path(path), payload)


def _write_maybe_gzip(path: Path, payload: bytes) -> None:
    if path.suffix == ".gz":
        # mtime=0 keeps the bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def synth_gaussian_mixture(num_classes: int, input_dim: int, per_class: int,
                           spread: float = 0.1, seed: int = 0,
                           separation: float = 0.4) -> LabeledDataset:
    """Isotropic Gaussian blobs around seeded unit-norm directions.

    Class ``c`` is centered at ``0.5 + separation * u_c``. When
    ``num_classes <= input_dim`` the ``u_c`` are orthonormal, so centers are
    pairwise ``separation * sqrt(2)`` apart; otherwise they are independent
    random unit vectors. Features are clipped to [0, 1]. Rows are grouped by
    class.
    """
    if num_classes < 1 or input_dim < 1 or per_class < 1:
        raise ConfigError("num_classes, input_dim and per_class must be positive")
    if not spread > 0:
        raise ConfigError("spread must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    if num_classes <= input_dim:
        q, r = np.linalg.qr(rng.standard_normal((input_dim, num_classes)))
        directions = (q * np.sign(np.diag(r))).T
    else:
        g = rng.standard_normal((num_classes, input_dim))
        directions = g / np.linalg.norm(g, axis=1, keepdims=True)
    centers = np.clip(0.5 + separation * directions, 0.0, 1.0)
    noise = rng.standard_normal((num_classes, per_class, input_dim)) * spread
    features = np.clip(centers[:, None, :] + noise, 0.0, 1.0).reshape(-1, input_dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(features, labels, num_classes)


def save_csv(dataset: LabeledDataset, path: PathLike) -> None:
    """Header ``f0..f{d-1},label``; one row per example."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dataset.input_dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path: PathLike, num_classes: int | None = None) -> LabeledDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label":
            raise FormatError("CSV header must end with a 'label' column", 0, str(path))
        rows = list(reader)
    width = len(header) - 1
    features = np.array([[float(v) for v in r[:width]] for r in rows]).reshape(-1, width)
    labels = np.array([int(r[width]) for r in rows], dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(features, labels, num_classes)
