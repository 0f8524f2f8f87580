"""Dataset ingestion, synthetic mixtures, and heterogeneous federated partitioning.

The partitioner implements the single-knob heterogeneity scheme: client l's
shard mixes a dominant slice drawn from true cluster l with a uniform slice
drawn from the whole dataset, the mix controlled by p in [0, 1].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised when an IDX file is malformed (bad magic, truncation, mismatch)."""


@dataclass
class LabeledDataset:
    X: np.ndarray  # (d, N), one sample per column
    y: np.ndarray  # (N,) true-cluster labels in [0, k_star)
    k_star: int
    d: int

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def __post_init__(self):
        if self.X.shape != (self.d, len(self.y)):
            raise ValueError(
                f"shape mismatch: X is {self.X.shape}, expected ({self.d}, {len(self.y)})"
            )
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.k_star):
            raise ValueError("labels must lie in [0, k_star)")


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray  # sample indices into the parent dataset
    p_used: float

    def to_manifest(self, seed: int) -> dict:
        return {
            "client_id": self.client_id,
            "indices": [int(i) for i in self.indices],
            "p": self.p_used,
            "seed": seed,
        }


@dataclass
class PartitionSpec:
    m: int  # client count; equals k_star under the one-dominant-class scheme
    p: float  # heterogeneity in [0, 1]
    s: int  # samples per client
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if self.m < 1 or self.s < 1:
            raise ValueError("m and s must be positive")


def _read_exact(f, nbytes: int, path, what: str) -> bytes:
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise IdxFormatError(
            f"truncated file {path}: expected {nbytes} bytes of {what}, found {len(buf)}"
        )
    return buf


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label file pair (big-endian, uint8 payload).

    Pixels are scaled to [0, 1] and images flattened row-major into columns.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, images_path, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"bad magic 0x{magic:08x} at offset 0 in {images_path}, "
                f"expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, images_path, "dims"))
        raw = _read_exact(f, n * rows * cols, images_path, "pixel data")
    with open(labels_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, labels_path, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"bad magic 0x{magic:08x} at offset 0 in {labels_path}, "
                f"expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        (n_labels,) = struct.unpack(">I", _read_exact(f, 4, labels_path, "count"))
        raw_labels = _read_exact(f, n_labels, labels_path, "label data")
    if n != n_labels:
        raise IdxFormatError(
            f"image/label count mismatch: {n} images in {images_path} "
            f"vs {n_labels} labels in {labels_path}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    X = pixels.reshape(n, rows * cols).T.copy()
    y = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    k_star = int(y.max()) + 1 if n else 0
    return LabeledDataset(X=X, y=y, k_star=k_star, d=rows * cols)


def synth_gmm(k_star: int, d: int, n_per_cluster: int, separation: float, seed: int) -> LabeledDataset:
    """Isotropic unit-variance Gaussian mixture: cluster c is centered at
    separation * e_{c mod d}. Deterministic per seed."""
    if k_star < 2 or d < 2:
        raise ValueError("need k_star >= 2 and d >= 2")
    rng = np.random.default_rng(seed)
    blocks = []
    labels = []
    for c in range(k_star):
        mu = np.zeros(d)
        mu[c % d] = separation
        blocks.append(mu[:, None] + rng.standard_normal((d, n_per_cluster)))
        labels.append(np.full(n_per_cluster, c, dtype=np.int64))
    return LabeledDataset(
        X=np.concatenate(blocks, axis=1), y=np.concatenate(labels), k_star=k_star, d=d
    )


def partition_heterogeneous(ds: LabeledDataset, spec: PartitionSpec) -> list[ClientShard]:
    """Split a dataset into m client shards with heterogeneity knob p.

    Client l receives round(p*s) samples drawn from true cluster l followed by
    s - round(p*s) samples drawn uniformly from the entire dataset. Both draws
    are with replacement, so clients are i.i.d. and any s is allowed; shards
    may overlap and may repeat an index.
    """
    if spec.m != ds.k_star:
        raise ValueError(f"m must equal k_star ({ds.k_star}), got {spec.m}")
    rng = np.random.default_rng(spec.seed)
    by_cluster = [np.where(ds.y == c)[0] for c in range(ds.k_star)]
    shards = []
    for l in range(spec.m):
        members = by_cluster[l]
        if members.size == 0:
            raise ValueError(f"cluster {l} has zero members")
        n_dom = int(np.floor(spec.p * spec.s + 0.5))  # round half up
        dominant = rng.choice(members, size=n_dom, replace=True)
        uniform = rng.choice(ds.n, size=spec.s - n_dom, replace=True)
        shards.append(
            ClientShard(
                client_id=l,
                indices=np.concatenate([dominant, uniform]).astype(np.int64),
                p_used=spec.p,
            )
        )
    return shards


def shard_purity(ds: LabeledDataset, shard: ClientShard) -> float:
    """Fraction of shard samples whose true label matches the client id."""
    return float(np.mean(ds.y[shard.indices] == shard.client_id))


def write_shard_manifests(shards: list[ClientShard], seed: int, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for shard in shards:
        path = out_dir / f"shard_{shard.client_id:03d}.json"
        path.write_text(json.dumps(shard.to_manifest(seed), indent=2) + "\n")
        paths.append(path)
    return paths
