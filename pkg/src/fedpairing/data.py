"""Synthetic Gaussian-cluster classification data and client sharding."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

_MAGIC = b"FPDS"


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    seed: Optional[int] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.seed)

    def class_histogram(self, idx=None) -> np.ndarray:
        labels = self.labels if idx is None else self.labels[np.asarray(idx, dtype=np.int64)]
        return np.bincount(labels, minlength=self.num_classes)


@dataclass
class ShardSpec:
    shards: List[np.ndarray]
    mode: str
    classes_per_client: Optional[int] = None

    def __len__(self) -> int:
        return len(self.shards)

    def sizes(self) -> List[int]:
        return [len(s) for s in self.shards]


def _separated_means(K: int, d: int, class_sep: float, rng: np.random.Generator) -> np.ndarray:
    means = rng.standard_normal((K, d))
    diffs = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(-1))
    min_dist = dist[np.triu_indices(K, 1)].min()
    return means * (class_sep / min_dist)


def generate_synthetic(
    num_classes: int, dim: int, per_class: int, seed: int, class_sep: float = 4.0
) -> Dataset:
    """Unit-variance Gaussian clusters whose means are at least ``class_sep`` apart."""
    if num_classes < 2 or dim < 2 or per_class < 10 or not class_sep > 0:
        raise ValueError("need K >= 2, d >= 2, per_class >= 10 and class_sep > 0")
    rng = np.random.default_rng(seed)
    means = _separated_means(num_classes, dim, class_sep, rng)
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + rng.standard_normal((len(labels), dim))
    return Dataset(features, labels, num_classes, seed)


def train_test_split(
    data: Dataset, test_fraction: float = 0.2, seed: int = 0, standardize: bool = True
) -> Tuple[Dataset, Dataset]:
    """Class-stratified split; features standardized with the train split's statistics."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(data.num_classes):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        n_test = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    xtr, xte = data.features[train_idx], data.features[test_idx]
    if standardize:
        mu, sd = xtr.mean(axis=0), xtr.std(axis=0)
        sd[sd == 0] = 1.0
        xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    return (
        Dataset(xtr, data.labels[train_idx], data.num_classes, data.seed),
        Dataset(xte, data.labels[test_idx], data.num_classes, data.seed),
    )


def partition_iid(data: Dataset, N: int, seed: int) -> ShardSpec:
    """Equal-size shards with identical per-class counts; per-class remainders are dropped."""
    counts = data.class_histogram()
    if N < 1 or N > counts.min():
        raise ValueError(f"cannot split {counts.min()} samples of a class across {N} clients")
    rng = np.random.default_rng(seed)
    parts: List[List[np.ndarray]] = [[] for _ in range(N)]
    dropped = 0
    for c in range(data.num_classes):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        per = len(idx) // N
        dropped += len(idx) - per * N
        for k in range(N):
            parts[k].append(idx[k * per : (k + 1) * per])
    if dropped:
        logger.info("iid partition dropped %d samples (class counts not divisible by %d)", dropped, N)
    return ShardSpec([np.sort(np.concatenate(p)) for p in parts], "iid")


def _assign_classes(N: int, K: int, cpc: int, rng: np.random.Generator) -> List[List[int]]:
    # least-assigned classes first, random tie-break, so every class gets a client when N*cpc >= K
    load = np.zeros(K, dtype=np.int64)
    out = []
    for _ in range(N):
        jitter = rng.random(K)
        chosen = sorted(np.lexsort((jitter, load))[:cpc].tolist())
        load[chosen] += 1
        out.append(chosen)
    return out


def partition_noniid(
    data: Dataset, N: int, classes_per_client: int = 2, seed: int = 0, max_attempts: int = 100
) -> ShardSpec:
    """Each client holds exactly ``classes_per_client`` classes.

    A class's samples are split evenly among the clients assigned to it.
    Classes are handed out least-assigned first, so every class has a holder
    whenever ``N * classes_per_client >= K``; otherwise the leftovers are dropped.
    """
    K = data.num_classes
    if not 1 <= classes_per_client <= K:
        raise ValueError(f"classes_per_client must be in [1, {K}]")
    if N < 1:
        raise ValueError("N must be >= 1")
    counts = data.class_histogram()
    rng = np.random.default_rng(seed)
    for attempt in range(max_attempts):
        assign = _assign_classes(N, K, classes_per_client, rng)
        holders = [[k for k in range(N) if c in assign[k]] for c in range(K)]
        if all(len(holders[c]) <= counts[c] for c in range(K)):
            break
        logger.debug("non-iid assignment attempt %d infeasible, retrying", attempt)
    else:
        raise ValueError(
            f"no feasible assignment of {classes_per_client} classes to {N} clients over {K} classes"
        )
    orphaned = [c for c in range(K) if not holders[c]]
    if orphaned:
        logger.info("non-iid partition: classes %s have no holder and are dropped", orphaned)
    parts: List[List[np.ndarray]] = [[] for _ in range(N)]
    for c in range(K):
        if not holders[c]:
            continue
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        for k, chunk in zip(holders[c], np.array_split(idx, len(holders[c]))):
            parts[k].append(chunk)
    return ShardSpec(
        [np.sort(np.concatenate(p)) for p in parts], "noniid", classes_per_client
    )


def save_dataset(data: Dataset, path) -> None:
    """Write ``FPDS`` + u32 header length + JSON header + f64 features + i64 labels (little-endian)."""
    header = json.dumps(
        {"n": len(data), "d": data.dim, "K": data.num_classes, "seed": data.seed}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(data.features.astype("<f8").tobytes())
        fh.write(data.labels.astype("<i8").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    n, d = header["n"], header["d"]
    off = 8 + hlen
    feats = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=off + 8 * n * d)
    return Dataset(feats.astype(np.float64), labels.astype(np.int64), header["K"], header["seed"])
