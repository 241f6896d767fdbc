"""Weighted k-nearest-neighbor echo-view classification.

A bank of L2-normalized per-frame descriptors with view labels is held
in memory; a query is classified by cosine similarity against the whole
bank, weighting each of the top-k neighbors by exp(similarity / tau) and
summing the weights per class. Search is exhaustive: the intended bank
size (order 10^4 frames) needs no index structure.

Index file (ALANKNN): magic "ALANKNN" | u16 version=1 | u32 M, C
| f32-LE descriptors [M, C] | label table (u16 class count, per class
u16 length + UTF-8 name, then M u8 class indices).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from alan.errors import ConfigError, DataError
from alan.feature_store import VIEW_LABELS

KNN_MAGIC = b"ALANKNN"
KNN_VERSION = 1


@dataclass(frozen=True)
class ViewIndex:
    """Immutable bank of L2-normalized descriptors with view labels."""

    descriptors: np.ndarray
    labels: tuple[str, ...]

    @property
    def M(self) -> int:
        return self.descriptors.shape[0]

    @property
    def C(self) -> int:
        return self.descriptors.shape[1]


@dataclass
class KnnConfig:
    k: int = 2
    temperature: float = 0.07

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")


@dataclass(frozen=True)
class ViewPrediction:
    label: str
    class_weights: dict


@dataclass(frozen=True)
class EvalResult:
    total_accuracy: float
    per_class: dict
    n_total: int
    n_correct: int


def build_index(descriptors: np.ndarray, labels) -> ViewIndex:
    """Normalize descriptors and freeze them with their labels."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    labels = tuple(str(l) for l in labels)
    if descriptors.ndim != 2 or len(labels) != descriptors.shape[0]:
        raise DataError(
            f"need [M, C] descriptors with M labels, got {descriptors.shape} "
            f"and {len(labels)} labels"
        )
    if descriptors.shape[0] < 1:
        raise DataError("index needs at least one descriptor")
    for label in labels:
        if label not in VIEW_LABELS:
            raise DataError(
                f"unknown view label '{label}' "
                f"(expected one of {', '.join(VIEW_LABELS)})"
            )
    norms = np.linalg.norm(descriptors, axis=1, keepdims=True)
    if (norms == 0).any():
        raise DataError("zero descriptor vector cannot be normalized")
    index = ViewIndex(descriptors=descriptors / norms, labels=labels)
    index.descriptors.setflags(write=False)
    return index


def classify(query: np.ndarray, index: ViewIndex,
             cfg: KnnConfig) -> ViewPrediction:
    """Temperature-weighted vote of the query's top-k cosine neighbors.

    Neighbor ties break toward the lower index; class ties toward the
    lexicographically first class name.
    """
    if cfg.k > index.M:
        raise DataError(f"k={cfg.k} exceeds index size M={index.M}")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.C:
        raise DataError(f"query has {query.shape[0]} channels, index {index.C}")
    norm = np.linalg.norm(query)
    if norm == 0:
        raise DataError("zero query vector cannot be normalized")
    sims = index.descriptors @ (query / norm)
    # Descending similarity, ties by lower index.
    order = np.lexsort((np.arange(index.M), -sims))[:cfg.k]
    weights: dict[str, float] = {}
    for i in order:
        w = float(np.exp(sims[i] / cfg.temperature))
        weights[index.labels[i]] = weights.get(index.labels[i], 0.0) + w
    best = max(sorted(weights), key=lambda name: weights[name])
    return ViewPrediction(label=best, class_weights=weights)


def evaluate(index: ViewIndex, queries: np.ndarray, labels,
             cfg: KnnConfig) -> EvalResult:
    """Total and per-class accuracy over a labeled test set.

    Classes absent from the test set are reported as None and excluded
    from any macro statistics a caller derives.
    """
    queries = np.asarray(queries, dtype=np.float64)
    labels = [str(l) for l in labels]
    if len(labels) == 0 or queries.shape[0] != len(labels):
        raise DataError("test set must be non-empty and aligned with labels")
    correct_by_class = {name: 0 for name in VIEW_LABELS}
    count_by_class = {name: 0 for name in VIEW_LABELS}
    n_correct = 0
    for q, truth in zip(queries, labels):
        pred = classify(q, index, cfg)
        count_by_class[truth] = count_by_class.get(truth, 0) + 1
        if pred.label == truth:
            correct_by_class[truth] = correct_by_class.get(truth, 0) + 1
            n_correct += 1
    per_class = {
        name: (correct_by_class[name] / count_by_class[name]
               if count_by_class[name] else None)
        for name in VIEW_LABELS
    }
    return EvalResult(
        total_accuracy=n_correct / len(labels),
        per_class=per_class,
        n_total=len(labels),
        n_correct=n_correct,
    )


# ---------------------------------------------------------------------------
# Persistence

def save_index(index: ViewIndex, path) -> None:
    class_names = sorted(set(index.labels))
    name_to_idx = {name: i for i, name in enumerate(class_names)}
    with open(path, "wb") as f:
        f.write(KNN_MAGIC + struct.pack("<HII", KNN_VERSION, index.M, index.C))
        f.write(index.descriptors.astype("<f4").tobytes())
        f.write(struct.pack("<H", len(class_names)))
        for name in class_names:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)) + encoded)
        f.write(bytes(name_to_idx[label] for label in index.labels))


def load_index(path) -> ViewIndex:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(KNN_MAGIC) or data[:len(KNN_MAGIC)] != KNN_MAGIC:
        raise DataError(f"{path}: bad magic, not an ALANKNN file")
    off = len(KNN_MAGIC)
    version, m, c = struct.unpack_from("<HII", data, off)
    if version != KNN_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    off += struct.calcsize("<HII")
    descriptors = np.frombuffer(data, dtype="<f4", count=m * c, offset=off)
    descriptors = descriptors.reshape(m, c).astype(np.float64)
    off += 4 * m * c
    (n_classes,) = struct.unpack_from("<H", data, off)
    off += 2
    class_names = []
    for _ in range(n_classes):
        (length,) = struct.unpack_from("<H", data, off)
        off += 2
        class_names.append(data[off:off + length].decode("utf-8"))
        off += length
    if len(data) != off + m:
        raise DataError(f"{path}: size mismatch in label table")
    labels = tuple(class_names[b] for b in data[off:off + m])
    # Renormalize: f32 round-trip may perturb norms at the last bit.
    norms = np.linalg.norm(descriptors, axis=1, keepdims=True)
    if (norms == 0).any():
        raise DataError(f"{path}: zero descriptor in stored index")
    return ViewIndex(descriptors=descriptors / norms, labels=labels)
