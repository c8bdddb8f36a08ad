"""Datasets and client partitioning.

Partitioners return one :class:`ClientShard` per client holding indices into
the parent :class:`Dataset`. All randomness comes from the ``seed`` argument,
so the same (dataset, spec, seed) always produces the same shards.
"""
from __future__ import annotations

import csv
import gzip
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 2051  # 0x00000803
LABELS_MAGIC = 2049  # 0x00000801


class IdxFormatError(ValueError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class BadMagicError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2 or len(x) < 1:
            raise ValueError("features must be a non-empty (n, d) array")
        if y.shape != (len(x),):
            raise ValueError(f"labels shape {y.shape} does not match {len(x)} samples")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: tuple[int, ...]

    @property
    def n_k(self) -> int:
        return len(self.indices)

    def index_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    num_clients: int = 100
    alpha: float = 0.5
    shards_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet", "shards"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.kind == "dirichlet" and not self.alpha > 0:
            raise ValueError("dirichlet alpha must be > 0")
        if self.kind == "shards" and self.shards_per_client < 1:
            raise ValueError("shards_per_client must be >= 1")


# -- IDX ----------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise TruncatedFileError(f"{what}: truncated header ({len(raw)} bytes)")
    found = struct.unpack(">i", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"{what}: bad magic number {found}, expected {magic}")
    if len(raw) < header:
        raise TruncatedFileError(f"{what}: truncated header ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(
            f"{what}: truncated data, expected {size} bytes, found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into a Dataset in [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise CountMismatchError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    _write(path, struct.pack(">4i", IMAGES_MAGIC, *images.shape) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    _write(path, struct.pack(">2i", LABELS_MAGIC, len(labels)) + labels.tobytes())


def _write(path, payload: bytes) -> None:
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


# -- synthetic ------------------------------------------------------------------


def blob_centers(num_classes: int) -> np.ndarray:
    """Cluster centers evenly spaced on a circle of radius 0.3 around (0.5, 0.5)."""
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    return 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_synthetic_blobs(n: int, num_classes: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters in the unit square with balanced class counts."""
    if n < num_classes:
        raise ValueError("n must be >= num_classes")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    x = blob_centers(num_classes)[labels] + spread * rng.standard_normal((n, 2))
    return Dataset(np.clip(x, 0.0, 1.0), labels, num_classes)


def save_csv(dataset: Dataset, path) -> None:
    """Write a 2D dataset as ``x0,x1,label`` rows."""
    if dataset.dim != 2:
        raise ValueError("CSV export supports 2D datasets only")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x0", "x1", "label"])
        for (a, b), y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(a)), repr(float(b)), int(y)])


def load_csv(path, num_classes: int | None = None) -> Dataset:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    x = np.array([[float(r["x0"]), float(r["x1"])] for r in rows])
    y = np.array([int(r["label"]) for r in rows])
    return Dataset(x, y, num_classes or int(y.max()) + 1)


# -- partitioning ---------------------------------------------------------------


def _shards(groups) -> list[ClientShard]:
    return [ClientShard(k, tuple(int(i) for i in g)) for k, g in enumerate(groups)]


def partition_iid(dataset: Dataset, num_clients: int, seed: int) -> list[ClientShard]:
    n = len(dataset)
    if num_clients > n:
        raise ValueError(f"cannot split {n} samples across {num_clients} clients")
    perm = np.random.default_rng(seed).permutation(n)
    return _shards(np.sort(part) for part in np.array_split(perm, num_clients))


def _largest_remainder(count: int, proportions: np.ndarray) -> np.ndarray:
    raw = proportions * count
    alloc = np.floor(raw).astype(np.int64)
    short = count - alloc.sum()
    if short:
        # ties broken by lower client index
        order = np.argsort(-(raw - alloc), kind="stable")
        alloc[order[:short]] += 1
    return alloc


def partition_dirichlet(
    dataset: Dataset, num_clients: int, alpha: float, seed: int
) -> list[ClientShard]:
    """Per class, draw client proportions from Dir(alpha) and split that class's
    samples accordingly. Every sample is assigned; some clients may get none."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    rng = np.random.default_rng(seed)
    groups: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        counts = _largest_remainder(len(idx), props)
        for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            groups[k].extend(part.tolist())
    return _shards(sorted(g) for g in groups)


def partition_shards(
    dataset: Dataset, num_clients: int, shards_per_client: int, seed: int
) -> list[ClientShard]:
    """Cut each label's samples into equal single-label shards and deal ``q``
    of them to each client, so no client sees more than ``q`` labels.

    The shard size is ``floor(n/(K*q))`` whenever the per-class counts allow
    ``K*q`` pure shards of that size (always true for balanced data); otherwise
    it shrinks to the largest size that does. Leftover samples are dropped.
    """
    n = len(dataset)
    total = num_clients * shards_per_client
    if shards_per_client < 1 or n < total:
        raise ValueError(f"cannot build {total} shards from {n} samples")
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    size = n // total
    while (counts // size).sum() < total:
        size -= 1
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    pieces = []
    for c in range(dataset.num_classes):
        members = perm[dataset.labels[perm] == c]
        pieces.extend(members[i * size:(i + 1) * size] for i in range(counts[c] // size))
    chosen = rng.permutation(len(pieces))[:total].reshape(num_clients, shards_per_client)
    return _shards(np.sort(np.concatenate([pieces[j] for j in row])) for row in chosen)


def partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    if spec.kind == "iid":
        return partition_iid(dataset, spec.num_clients, spec.seed)
    if spec.kind == "dirichlet":
        return partition_dirichlet(dataset, spec.num_clients, spec.alpha, spec.seed)
    return partition_shards(dataset, spec.num_clients, spec.shards_per_client, spec.seed)


def label_histogram(dataset: Dataset, shards: list[ClientShard]) -> np.ndarray:
    """``(K, C)`` matrix of per-client label counts."""
    hist = np.zeros((len(shards), dataset.num_classes), dtype=np.int64)
    for row, shard in enumerate(shards):
        if shard.n_k:
            hist[row] = np.bincount(dataset.labels[shard.index_array()], minlength=dataset.num_classes)
    return hist


def write_manifest(shards: list[ClientShard], path) -> None:
    """One JSON object per line: ``{"client": k, "indices": [...]}``."""
    with open(path, "w") as f:
        for s in shards:
            f.write(json.dumps({"client": s.client_id, "indices": list(s.indices)}) + "\n")


def read_manifest(path) -> list[ClientShard]:
    shards = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                shards.append(ClientShard(int(rec["client"]), tuple(rec["indices"])))
    return shards


def write_histogram_csv(hist: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["client", "n_k"] + [f"label_{c}" for c in range(hist.shape[1])])
        for k, row in enumerate(hist):
            w.writerow([k, int(row.sum())] + [int(v) for v in row])


def data_dir() -> Path:
    return Path(os.environ.get("DBFAT_DATA_DIR", "data"))
