"""Semantic projection, streaming K-means, and per-item enhancement weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import compute as C
from .compute import Tensor


@dataclass
class AlignmentConfig:
    n_clusters: int = 50
    epsilon: float = 1e-8

    def validate(self) -> None:
        from .data import ConfigError

        if self.n_clusters < 1:
            raise ConfigError(f"alignment.n_clusters must be >= 1, got {self.n_clusters}")
        if not self.epsilon > 0:
            raise ConfigError(f"alignment.epsilon must be > 0, got {self.epsilon}")


@dataclass
class ClusterState:
    """Centroid matrix; only the first ``n_filled`` rows are live."""

    centroids: np.ndarray
    counts: np.ndarray
    n_filled: int

    @classmethod
    def empty(cls, n_clusters: int, d: int) -> "ClusterState":
        return cls(np.zeros((n_clusters, d)), np.zeros(n_clusters, dtype=np.int64), 0)

    @classmethod
    def from_centroids(cls, centroids) -> "ClusterState":
        centroids = np.array(centroids, dtype=np.float64)
        return cls(centroids, np.zeros(len(centroids), dtype=np.int64), len(centroids))

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    @property
    def live(self) -> np.ndarray:
        return self.centroids[: self.n_filled]

    def copy(self) -> "ClusterState":
        return ClusterState(self.centroids.copy(), self.counts.copy(), self.n_filled)


def project_attributes(project, e_b, e_c) -> Tensor:
    """Map ``[e_b || e_c]`` into the cluster space with the projection MLP."""
    return project(C.concat([C._as_tensor(e_b), C._as_tensor(e_c)]))


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def kmeans_update(a_batch, state: ClusterState) -> ClusterState:
    """One mini-batch step: assign to nearest live centroid, then running-mean moves.

    Until all rows are live, each vector not already equal to a centroid
    seeds the next empty row. Returns a new state; ``state`` is untouched.
    """
    a_batch = np.asarray(a_batch, dtype=np.float64).reshape(-1, state.centroids.shape[1])
    new = state.copy()
    if new.n_filled < new.n_clusters:
        for row in a_batch:
            if new.n_filled == new.n_clusters:
                break
            live = new.live
            if len(live) and np.any(np.all(live == row, axis=1)):
                continue
            new.centroids[new.n_filled] = row
            new.n_filled += 1
    if new.n_filled == 0 or len(a_batch) == 0:
        return new
    assign = np.argmin(_sq_dists(a_batch, new.live), axis=1)
    for row, c in zip(a_batch, assign):
        new.counts[c] += 1
        new.centroids[c] += (row - new.centroids[c]) / new.counts[c]
    return new


def nearest_centroid(e, centroids) -> int:
    """Index of the closest row (Euclidean); ties go to the smallest index."""
    centroids = np.asarray(centroids, dtype=np.float64)
    if len(centroids) == 0:
        raise ValueError("no centroids")
    diff = centroids - np.asarray(e, dtype=np.float64)
    return int(np.argmin(np.einsum("kd,kd->k", diff, diff)))


def enhancement_weight(e, r, epsilon: float = 1e-8) -> float:
    """``1 - (cos(e, r) + 1) / 2`` with ``epsilon`` guarding the norm product."""
    e = np.asarray(e, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    cos = float(e @ r) / (float(np.linalg.norm(e)) * float(np.linalg.norm(r)) + epsilon)
    return min(max(1.0 - 0.5 * (cos + 1.0), 0.0), 1.0)


def enhancement_weights(embeddings, state: ClusterState, epsilon: float = 1e-8) -> np.ndarray:
    """Vectorized weights for many ID embeddings against their nearest live centroid.

    With no live centroid yet every weight is 0.5 (the zero-cosine value).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if state.n_filled == 0:
        return np.full(len(emb), 0.5)
    live = state.live
    nearest = np.argmin(_sq_dists(emb, live), axis=1)
    r = live[nearest]
    dots = np.einsum("md,md->m", emb, r)
    norms = np.linalg.norm(emb, axis=1) * np.linalg.norm(r, axis=1)
    alpha = 1.0 - 0.5 * (dots / (norms + epsilon) + 1.0)
    return np.clip(alpha, 0.0, 1.0)
