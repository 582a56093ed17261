"""Representation probes: exact kNN retrieval in embedding space,
between/within-category distance statistics, and file exports."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .images import float_chw_to_u8, write_pgm, write_ppm
from .network import Network
from .pairs import TurntableShot

__all__ = [
    "EmbeddingIndex",
    "DistanceStats",
    "embed_shots",
    "knn_retrieve",
    "distance_stats",
    "export_distance_matrix",
    "export_confusion_matrix",
    "export_retrieval_grid",
]


@dataclass
class EmbeddingIndex:
    """n embeddings with aligned shot references; Euclidean metric."""

    vectors: np.ndarray  # [n, d] float64
    refs: list
    space: str  # identity | pose | full
    metric: str = "euclidean"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"index wants [n, d] vectors, got shape {self.vectors.shape}")
        if len(self.refs) != len(self.vectors):
            raise ValueError(f"{len(self.refs)} refs for {len(self.vectors)} vectors")
        if self.metric != "euclidean":
            raise ValueError("only the euclidean metric is supported")

    def __len__(self):
        return len(self.vectors)


def embed_shots(
    network: Network,
    shots: Sequence[TurntableShot],
    images: Mapping[str, np.ndarray],
    space: str,
    batch_size: int = 128,
) -> EmbeddingIndex:
    chunks = []
    for lo in range(0, len(shots), batch_size):
        batch = np.stack([images[s.image_path] for s in shots[lo : lo + batch_size]])
        chunks.append(network.extract_embedding(batch.astype(network.store.dtype), space))
    return EmbeddingIndex(np.concatenate(chunks, axis=0), list(shots), space)


def _distances_to(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    return np.sqrt(((vectors - query[None, :]) ** 2).sum(axis=1))


def knn_retrieve(
    index: EmbeddingIndex,
    query: np.ndarray,
    k: int,
    exclude: Optional[int] = None,
) -> list[tuple[int, float]]:
    """The k exactly-nearest rows as (row, distance), ties broken by insertion
    order. ``exclude`` removes the query's own row when it is an index member."""
    n = len(index)
    available = n - (1 if exclude is not None else 0)
    if k > available:
        raise ValueError(f"k={k} exceeds the {available} available rows")
    dist = _distances_to(index.vectors, np.asarray(query, dtype=np.float64))
    if exclude is not None:
        dist[exclude] = np.inf
    order = np.argsort(dist, kind="stable")[:k]
    return [(int(i), float(dist[i])) for i in order]


@dataclass
class DistanceStats:
    """Mean pairwise Euclidean distances per category pair.

    The diagonal holds within-category means over distinct unordered pairs;
    categories with one member get NaN there and are excluded from
    ``mean_within``. ``ratio`` is inf when within-distances vanish and NaN
    when everything does; ``degenerate`` says which."""

    categories: list[int]
    matrix: np.ndarray  # [K, K]
    mean_within: float
    mean_between: float
    ratio: float
    degenerate: Optional[str] = None


def distance_stats(index: EmbeddingIndex, labels: Sequence[int]) -> DistanceStats:
    labels = np.asarray(labels)
    if len(labels) != len(index):
        raise ValueError(f"{len(labels)} labels for {len(index)} vectors")
    categories = sorted(set(labels.tolist()))
    if len(categories) < 2:
        raise ValueError("distance statistics need at least two categories")
    vectors = index.vectors
    members = {c: np.flatnonzero(labels == c) for c in categories}
    k = len(categories)
    matrix = np.zeros((k, k))
    within_sum = within_count = 0.0
    between_sum = between_count = 0.0
    for i, ci in enumerate(categories):
        vi = vectors[members[ci]]
        for j in range(i, k):
            cj = categories[j]
            vj = vectors[members[cj]]
            d = np.sqrt(((vi[:, None, :] - vj[None, :, :]) ** 2).sum(axis=2))
            if i == j:
                n = len(vi)
                if n < 2:
                    warnings.warn(
                        f"category {ci} has {n} member(s); its within-distance is undefined",
                        stacklevel=2,
                    )
                    matrix[i, i] = np.nan
                    continue
                upper = d[np.triu_indices(n, k=1)]
                matrix[i, i] = upper.mean()
                within_sum += upper.sum()
                within_count += upper.size
            else:
                matrix[i, j] = matrix[j, i] = d.mean()
                between_sum += d.sum()
                between_count += d.size
    mean_within = within_sum / within_count if within_count else float("nan")
    mean_between = between_sum / between_count if between_count else float("nan")
    degenerate = None
    if mean_between == 0.0 and mean_within == 0.0:
        ratio = float("nan")
        degenerate = "all embeddings identical; ratio undefined"
    elif mean_within == 0.0:
        ratio = float("inf")
        degenerate = "zero within-category distances; ratio unbounded"
    else:
        ratio = mean_between / mean_within
    return DistanceStats(categories, matrix, mean_within, mean_between, ratio, degenerate)


# -- exports -------------------------------------------------------------------


def export_distance_matrix(stats: DistanceStats, csv_path, heatmap_path=None) -> None:
    """Matrix as comma-separated text (header + K rows) and, optionally, a
    grayscale heat map whose brightness is monotone in the entry."""
    header = "category," + ",".join(str(c) for c in stats.categories)
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for c, row in zip(stats.categories, stats.matrix):
            fh.write(str(c) + "," + ",".join(format(v, ".10g") for v in row) + "\n")
    if heatmap_path is not None:
        m = stats.matrix.copy()
        finite = np.isfinite(m)
        lo = m[finite].min() if finite.any() else 0.0
        hi = m[finite].max() if finite.any() else 1.0
        span = hi - lo
        scaled = (m - lo) / span if span > 0 else np.zeros_like(m)
        scaled[~finite] = 1.0
        cell = 16  # blow tiny matrices up to a visible size
        gray = np.round(scaled * 255).astype(np.uint8)
        write_pgm(heatmap_path, np.kron(gray, np.ones((cell, cell), dtype=np.uint8)))


def export_confusion_matrix(confusion: np.ndarray, csv_path) -> None:
    k = confusion.shape[0]
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("true_class," + ",".join(str(c) for c in range(k)) + "\n")
        for c, row in enumerate(confusion):
            fh.write(str(c) + "," + ",".join(str(int(v)) for v in row) + "\n")


def export_retrieval_grid(
    index: EmbeddingIndex,
    query_rows: Sequence[int],
    k: int,
    images: Mapping[str, np.ndarray],
    path,
    pad: int = 2,
) -> None:
    """One row per query: the query image then its k nearest neighbors."""
    tiles: list[list[np.ndarray]] = []
    for row in query_rows:
        neighbors = knn_retrieve(index, index.vectors[row], k, exclude=row)
        shots = [index.refs[row]] + [index.refs[i] for i, _ in neighbors]
        tiles.append([images[s.image_path] for s in shots])
    h, w = tiles[0][0].shape[-2:]
    grid = np.zeros(
        (3, len(tiles) * (h + pad) - pad, (k + 1) * (w + pad) - pad), dtype=np.float32
    )
    for r, row_tiles in enumerate(tiles):
        for c, tile in enumerate(row_tiles):
            grid[:, r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = tile
    write_ppm(path, float_chw_to_u8(grid))
