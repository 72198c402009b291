"""Diversity curation over artifact embeddings.

Averages per-view embedding vectors, clusters the corpus with seeded
k-means (k-means++ init, Lloyd iterations), picks one nearest-to-centroid
exemplar per cluster, and answers brute-force similarity queries.

Embedding interchange format: a binary file with header ``EMB1`` + uint32 D
+ uint32 N (little endian) followed by N rows of D float32 values, plus a
sidecar text file with one artifact id per line (row order).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"EMB1"
DEFAULT_VIEW_COUNT = 8
DEFAULT_MAX_ITERS = 100


class CurateError(Exception):
    """Raised for malformed embedding inputs or infeasible clustering requests."""


@dataclass(frozen=True)
class EmbeddingVector:
    artifact_id: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise CurateError("embedding vector must be a nonempty 1-D array")
        if not np.all(np.isfinite(vec)):
            raise CurateError(f"non-finite embedding for {self.artifact_id!r}")
        object.__setattr__(self, "vector", vec)


class EmbeddingSet:
    """Aligned artifact ids and an N x D float matrix with shared dimension D."""

    def __init__(self, ids: list[str], matrix: np.ndarray) -> None:
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] == 0 or matrix.shape[1] == 0:
            raise CurateError("embedding matrix must be a nonempty 2-D array")
        if len(ids) != matrix.shape[0]:
            raise CurateError(
                f"id count {len(ids)} does not match row count {matrix.shape[0]}"
            )
        if len(set(ids)) != len(ids):
            raise CurateError("duplicate artifact ids in embedding set")
        if not np.all(np.isfinite(matrix)):
            raise CurateError("embedding matrix contains non-finite values")
        self.ids = list(ids)
        self.matrix = matrix

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])


def write_embeddings(path: str | Path, ids_path: str | Path, embeddings: EmbeddingSet) -> None:
    n, d = embeddings.matrix.shape
    with Path(path).open("wb") as handle:
        handle.write(EMBEDDING_MAGIC)
        handle.write(struct.pack("<II", d, n))
        handle.write(np.ascontiguousarray(embeddings.matrix, dtype="<f4").tobytes())
    Path(ids_path).write_text("\n".join(embeddings.ids) + "\n", encoding="utf-8")


def read_embeddings(path: str | Path, ids_path: str | Path) -> EmbeddingSet:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != EMBEDDING_MAGIC:
        raise CurateError(f"{path}: not an embedding file (bad magic)")
    d, n = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * d * n
    if len(blob) != expected:
        raise CurateError(f"{path}: expected {expected} bytes for {n}x{d}, got {len(blob)}")
    matrix = np.frombuffer(blob, dtype="<f4", offset=12).reshape(n, d).astype(np.float64)
    ids = Path(ids_path).read_text(encoding="utf-8").splitlines()
    ids = [line.strip() for line in ids if line.strip()]
    if len(ids) != n:
        raise CurateError(f"{ids_path}: {len(ids)} ids for {n} embedding rows")
    return EmbeddingSet(ids, matrix)


def average_view_embeddings(
    artifact_id: str,
    views: list[np.ndarray],
    *,
    expected_views: int = DEFAULT_VIEW_COUNT,
) -> EmbeddingVector:
    """Component-wise mean of per-view vectors; a short view count only warns."""
    if not views:
        raise CurateError(f"{artifact_id!r}: no views to average")
    stacked = [np.asarray(v, dtype=np.float64).ravel() for v in views]
    dims = {v.shape[0] for v in stacked}
    if len(dims) != 1:
        raise CurateError(f"{artifact_id!r}: mixed view dimensions {sorted(dims)}")
    if len(stacked) != expected_views:
        logger.warning(
            "artifact %s has %d views, expected %d", artifact_id, len(stacked), expected_views
        )
    return EmbeddingVector(artifact_id, np.mean(stacked, axis=0))


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: dict[str, int]
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    n_iterations: int = 0


def _kmeanspp_init(matrix: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = matrix.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = int(rng.integers(n))
    # min squared distance from each point to the chosen set so far
    d2 = np.sum((matrix - matrix[chosen[0]]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass on already-chosen duplicates; pick any unchosen row
            unchosen = np.setdiff1d(np.arange(n), chosen[:i])
            chosen[i] = int(unchosen[int(rng.integers(unchosen.size))])
        else:
            chosen[i] = int(rng.choice(n, p=d2 / total))
        d2 = np.minimum(d2, np.sum((matrix - matrix[chosen[i]]) ** 2, axis=1))
    return matrix[chosen].copy()


def _assign(matrix: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Nearest-centroid labels, chunked over points so memory stays bounded.

    Chunking never changes the result: each point's label depends only on its
    own row, so the parallel/chunked path is bit-identical to one big argmin.
    """
    labels = np.empty(matrix.shape[0], dtype=np.int64)
    for start in range(0, matrix.shape[0], chunk):
        block = matrix[start : start + chunk]
        d2 = (
            np.sum(block * block, axis=1)[:, None]
            - 2.0 * block @ centroids.T
            + np.sum(centroids * centroids, axis=1)[None, :]
        )
        labels[start : start + chunk] = np.argmin(d2, axis=1)
    return labels


def _repair_empty_clusters(labels: np.ndarray, matrix: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    k = centroids.shape[0]
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return labels
    labels = labels.copy()
    own_d2 = np.sum((matrix - centroids[labels]) ** 2, axis=1)
    for cluster in empty:
        # steal the point farthest from its centroid, but never the last
        # member of another cluster (that would just move the hole around)
        candidates = np.flatnonzero(counts[labels] >= 2)
        if candidates.size == 0:
            candidates = np.arange(labels.shape[0])
        steal = int(candidates[np.argmax(own_d2[candidates])])
        counts[labels[steal]] -= 1
        counts[cluster] += 1
        labels[steal] = cluster
        own_d2[steal] = -1.0
    return labels


def kmeans_cluster(
    embeddings: EmbeddingSet,
    k: int,
    *,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
) -> ClusterModel:
    """Seeded k-means++ then Lloyd iterations to an assignment fixpoint.

    The recorded inertia history is nonincreasing; empty clusters are
    repaired by reseeding them with the point farthest from its centroid.
    """
    matrix = embeddings.matrix
    n = matrix.shape[0]
    if k < 1:
        raise CurateError("k must be at least 1")
    if k > n:
        raise CurateError(f"cannot form {k} clusters from {n} points")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(matrix, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    iterations = 0

    for _ in range(max_iters):
        new_labels = _assign(matrix, centroids)
        new_labels = _repair_empty_clusters(new_labels, matrix, centroids)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        iterations += 1
        # means update; repair guarantees every cluster has a member
        centroids = np.zeros_like(centroids)
        np.add.at(centroids, labels, matrix)
        centroids /= np.bincount(labels, minlength=k)[:, None]
        history.append(float(np.sum((matrix - centroids[labels]) ** 2)))

    inertia = float(np.sum((matrix - centroids[labels]) ** 2))
    assignments = {embeddings.ids[i]: int(labels[i]) for i in range(n)}
    return ClusterModel(
        k=k,
        centroids=centroids,
        assignments=assignments,
        inertia=inertia,
        inertia_history=history,
        n_iterations=iterations,
    )


def select_exemplars(model: ClusterModel, embeddings: EmbeddingSet) -> list[str]:
    """One artifact id per cluster: the member closest to the centroid.

    Distance ties break toward the lexicographically smallest id.
    """
    missing = [aid for aid in embeddings.ids if aid not in model.assignments]
    if missing:
        raise CurateError(f"{len(missing)} embeddings lack cluster assignments")
    best: dict[int, tuple[float, str]] = {}
    for row, artifact_id in enumerate(embeddings.ids):
        cluster = model.assignments[artifact_id]
        d2 = float(np.sum((embeddings.matrix[row] - model.centroids[cluster]) ** 2))
        key = (d2, artifact_id)
        if cluster not in best or key < best[cluster]:
            best[cluster] = key
    return [best[cluster][1] for cluster in sorted(best)]


def nearest_neighbors(
    query: np.ndarray, embeddings: EmbeddingSet, k: int
) -> list[tuple[str, float]]:
    """Exact Euclidean top-k over the whole set, ties broken by ascending id."""
    if k < 1 or k > len(embeddings):
        raise CurateError(f"k={k} out of range for {len(embeddings)} vectors")
    query = np.asarray(query, dtype=np.float64).ravel()
    if query.shape[0] != embeddings.dimension:
        raise CurateError(
            f"query dimension {query.shape[0]} != set dimension {embeddings.dimension}"
        )
    dists = np.sqrt(np.sum((embeddings.matrix - query) ** 2, axis=1))
    ranked = sorted(zip(embeddings.ids, dists), key=lambda pair: (pair[1], pair[0]))
    return [(artifact_id, float(dist)) for artifact_id, dist in ranked[:k]]
