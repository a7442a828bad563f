"""Pseudo-label cascade: mini-batch k-means over unit embeddings, AHC over
the resulting centroids, label composition, and small-speaker filtering.

K-means operates on L2-normalized vectors, so Euclidean nearest-center
assignment ranks identically to cosine similarity. All steps are
deterministic for a fixed seed; assignment ties break toward the lowest
center index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.cluster.hierarchy
import scipy.spatial.distance
from sklearn.base import BaseEstimator

from .dataio import EmbeddingSet, _write_text
from .errors import ConfigError, EmptyResult, NormError, TooFewPoints

_LINKAGES = ("single", "complete", "average")


@dataclass
class KMeansModel:
    centers: np.ndarray  # (k, dim)
    assignments: dict[str, int]
    inertia: float
    k: int


@dataclass
class PseudoLabelSet:
    labels: dict[str, int]
    n_speakers: int
    removed: set[str] = field(default_factory=set)

    def counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for label in self.labels.values():
            counts[label] = counts.get(label, 0) + 1
        return counts


class MiniBatchSphericalKMeans(BaseEstimator):
    """Mini-batch k-means for unit-norm vectors with deterministic updates.

    Initialization is k-means++ over a seeded subsample of size
    min(10 * k, n). Each iteration draws one batch, assigns it to the
    nearest centers, and applies per-center running-mean updates; training
    stops when the mean center movement drops below `tol` or after
    `max_iters` batches. Centers left empty by the final full assignment
    are reseeded to the point farthest from its assigned center.
    """

    def __init__(self, k=8, seed=0, batch_size=4096, max_iters=100, tol=1e-4):
        self.k = k
        self.seed = seed
        self.batch_size = batch_size
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        if self.k < 1 or n < self.k:
            raise TooFewPoints(f"need at least k={self.k} points, got {n}")
        norms = np.linalg.norm(X, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise NormError("k-means input must be L2-normalized")

        rng = np.random.default_rng(self.seed)
        centers = self._init_plus_plus(X, rng)
        counts = np.zeros(self.k, dtype=np.int64)
        for _ in range(self.max_iters):
            batch_idx = rng.choice(n, size=min(self.batch_size, n), replace=False)
            batch = X[batch_idx]
            assign = self._assign(batch, centers)
            old = centers.copy()
            for c in np.unique(assign):
                members = batch[assign == c]
                m = len(members)
                counts[c] += m
                centers[c] += (members.sum(axis=0) - m * centers[c]) / counts[c]
            movement = float(np.mean(np.linalg.norm(centers - old, axis=1)))
            if movement < self.tol:
                break

        labels = self._final_assignment(X, centers)
        self.cluster_centers_ = centers
        self.labels_ = labels
        diffs = X - centers[labels]
        self.inertia_ = float(np.sum(diffs * diffs))
        return self

    def predict(self, X):
        return self._assign(np.asarray(X, dtype=np.float64), self.cluster_centers_)

    @staticmethod
    def _assign(points, centers):
        # |x - c|^2 = |x|^2 + |c|^2 - 2 x.c; argmin breaks ties at lowest index
        d2 = (
            np.sum(points**2, axis=1)[:, None]
            + np.sum(centers**2, axis=1)[None, :]
            - 2.0 * points @ centers.T
        )
        return np.argmin(d2, axis=1)

    def _init_plus_plus(self, X, rng):
        n = X.shape[0]
        sample_idx = rng.choice(n, size=min(10 * self.k, n), replace=False)
        sample = X[sample_idx]
        centers = np.empty((self.k, X.shape[1]))
        centers[0] = sample[rng.integers(len(sample))]
        d2 = np.sum((sample - centers[0]) ** 2, axis=1)
        for i in range(1, self.k):
            total = d2.sum()
            if total <= 0:
                centers[i:] = sample[rng.choice(len(sample), size=self.k - i)]
                break
            probs = d2 / total
            centers[i] = sample[rng.choice(len(sample), p=probs)]
            d2 = np.minimum(d2, np.sum((sample - centers[i]) ** 2, axis=1))
        return centers

    def _final_assignment(self, X, centers):
        for _ in range(self.k):
            labels = self._assign(X, centers)
            occupied = np.bincount(labels, minlength=self.k) > 0
            if occupied.all():
                return labels
            dists = np.linalg.norm(X - centers[labels], axis=1)
            empty = int(np.flatnonzero(~occupied)[0])
            centers[empty] = X[int(np.argmax(dists))]
        return self._assign(X, centers)


def minibatch_kmeans(embeddings: EmbeddingSet, k: int, seed: int = 0,
                     batch_size: int = 4096, max_iters: int = 100,
                     tol: float = 1e-4) -> KMeansModel:
    model = MiniBatchSphericalKMeans(
        k=k, seed=seed, batch_size=batch_size, max_iters=max_iters, tol=tol
    ).fit(embeddings.matrix().astype(np.float64))
    assignments = dict(zip(embeddings.ids(), (int(c) for c in model.labels_)))
    return KMeansModel(
        centers=model.cluster_centers_,
        assignments=assignments,
        inertia=model.inertia_,
        k=k,
    )


def ahc(centers: np.ndarray, n_clusters: int, linkage: str = "average") -> np.ndarray:
    """Agglomerative clustering of centroids under cosine distance.

    Cuts the dendrogram after exactly k - n_clusters merges, so the output
    always has exactly n_clusters distinct labels, densely numbered in order
    of each cluster's smallest member index.
    """
    centers = np.asarray(centers, dtype=np.float64)
    k = centers.shape[0]
    if not (1 <= n_clusters <= k):
        raise ConfigError(f"n_clusters must be in [1, {k}], got {n_clusters}")
    if linkage not in _LINKAGES:
        raise ConfigError(f"linkage must be one of {_LINKAGES}")
    if n_clusters == k:
        return np.arange(k)
    condensed = scipy.spatial.distance.pdist(centers, metric="cosine")
    merges = scipy.cluster.hierarchy.linkage(condensed, method=linkage)
    parent = list(range(2 * k - 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for step in range(k - n_clusters):
        a, b = int(merges[step, 0]), int(merges[step, 1])
        parent[find(a)] = parent[find(b)] = k + step
    roots = [find(i) for i in range(k)]
    label_of_root: dict[int, int] = {}
    labels = np.empty(k, dtype=np.int64)
    for i, root in enumerate(roots):
        if root not in label_of_root:
            label_of_root[root] = len(label_of_root)
        labels[i] = label_of_root[root]
    return labels


def compose_pseudo_labels(kmeans: KMeansModel, center_labels: np.ndarray) -> PseudoLabelSet:
    center_labels = np.asarray(center_labels)
    if center_labels.shape != (kmeans.k,):
        raise ConfigError(
            f"center_labels has shape {center_labels.shape}, expected ({kmeans.k},)"
        )
    labels = {uid: int(center_labels[c]) for uid, c in kmeans.assignments.items()}
    return PseudoLabelSet(labels=labels, n_speakers=len(set(labels.values())))


def filter_min_count(labelset: PseudoLabelSet, min_count: int = 10) -> PseudoLabelSet:
    """Drop pseudo-speakers with fewer than min_count utterances, renumber."""
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    counts = labelset.counts()
    survivors = sorted(label for label, c in counts.items() if c >= min_count)
    if not survivors:
        raise EmptyResult("every pseudo-speaker fell below min_count")
    renumber = {old: new for new, old in enumerate(survivors)}
    labels = {}
    removed = set(labelset.removed)
    for uid, old in labelset.labels.items():
        if old in renumber:
            labels[uid] = renumber[old]
        else:
            removed.add(uid)
    return PseudoLabelSet(labels=labels, n_speakers=len(survivors), removed=removed)


def label_purity(labels: dict[str, int], truth: dict[str, str]) -> float:
    """Fraction of utterances whose cluster's majority true speaker they share."""
    by_cluster: dict[int, dict[str, int]] = {}
    for uid, label in labels.items():
        by_cluster.setdefault(label, {}).setdefault(truth[uid], 0)
        by_cluster[label][truth[uid]] += 1
    correct = sum(max(members.values()) for members in by_cluster.values())
    return correct / len(labels)


def write_pseudo_labels(labelset: PseudoLabelSet, path, removed_path=None) -> None:
    lines = [f"{uid}\t{label}" for uid, label in labelset.labels.items()]
    _write_text(path, "\n".join(lines) + ("\n" if lines else ""))
    if removed_path is not None:
        removed = sorted(labelset.removed)
        _write_text(removed_path, "\n".join(removed) + ("\n" if removed else ""))
