"""Cluster assignment of real samples to synthetic points, and k-means."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PartitionError(ValueError):
    pass


@dataclass
class ClusterAssignment:
    assignment: np.ndarray          # sample index -> cluster id
    num_clusters: int
    center_source: str = "synthetic-points"
    members: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            self.members = [np.flatnonzero(self.assignment == k) for k in range(self.num_clusters)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_clusters)


@dataclass
class KMeansResult:
    clusters: ClusterAssignment
    centers: np.ndarray
    sse_history: list
    iterations: int
    converged: bool


def _flat(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return x.reshape(0, int(np.prod(x.shape[1:])))
    return x.reshape(x.shape[0], -1)


def sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance table, ``(n_points, n_centers)``."""
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def assign_to_nearest(features, centers, labels=None, center_labels=None) -> ClusterAssignment:
    """Assign each sample to its squared-Euclidean-nearest center.

    With ``labels`` and ``center_labels`` given, a sample only competes
    among centers of its own class. Ties go to the lowest center index.
    """
    x = _flat(features)
    c = _flat(centers)
    if c.shape[0] == 0:
        raise PartitionError("at least one center is required")
    if x.shape[1] != c.shape[1]:
        raise PartitionError(f"feature dimension {x.shape[1]} does not match center dimension {c.shape[1]}")
    d = sq_distances(x, c)
    if labels is not None:
        if center_labels is None:
            raise PartitionError("class-conditional assignment needs center_labels")
        labels = np.asarray(labels)
        center_labels = np.asarray(center_labels)
        missing = set(np.unique(labels).tolist()) - set(center_labels.tolist())
        if missing:
            raise PartitionError(f"no center available for classes {sorted(missing)}")
        d = np.where(labels[:, None] == center_labels[None, :], d, np.inf)
    # argmin returns the first minimum -> lowest index on ties
    assignment = np.argmin(d, axis=1)
    return ClusterAssignment(assignment, c.shape[0], "synthetic-points")


def select_centers(features, labels, max_clusters: int, seed: int):
    """Pick the synthetic points that serve as cluster centers.

    Classes with at most ``max_clusters`` synthetic points use all of them;
    otherwise ``max_clusters`` points of that class are drawn without
    replacement. Returns ``(centers, center_labels, indices)``.
    """
    if max_clusters < 1:
        raise PartitionError("max_clusters must be >= 1")
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.shape[0] == 0:
        raise PartitionError("synthetic set is empty")
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size > max_clusters:
            idx = np.sort(rng.choice(idx, size=max_clusters, replace=False))
        chosen.append(idx)
    indices = np.concatenate(chosen)
    return x[indices], labels[indices], indices


def _sse(x: np.ndarray, centers: np.ndarray, assignment: np.ndarray) -> float:
    diff = x - centers[assignment]
    return float(np.einsum("ij,ij->", diff, diff))


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = sq_distances(x, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center
            idx = rng.integers(n)
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(x[idx])
        closest = np.minimum(closest, sq_distances(x, x[idx][None, :])[:, 0])
    return np.array(centers)


def kmeans(features, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops at an assignment fixpoint or after ``max_iters`` rounds. An empty
    cluster is reseeded at the point farthest from its current center.
    ``sse_history`` holds the within-cluster SSE after every assignment and
    is nonincreasing.
    """
    x = _flat(features)
    n = x.shape[0]
    if k < 1:
        raise PartitionError("k must be >= 1")
    if n < k:
        raise PartitionError(f"cannot form {k} clusters from {n} samples")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    assignment = np.argmin(sq_distances(x, centers), axis=1)
    history = [_sse(x, centers, assignment)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        centers = centers.copy()
        for j in range(k):
            members = assignment == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
        counts = np.bincount(assignment, minlength=k)
        for j in np.flatnonzero(counts == 0):
            cost = np.einsum("ij,ij->i", x - centers[assignment], x - centers[assignment])
            far = int(np.argmax(cost))
            centers[j] = x[far]
            assignment[far] = j
        new_assignment = np.argmin(sq_distances(x, centers), axis=1)
        history.append(_sse(x, centers, new_assignment))
        if np.array_equal(new_assignment, assignment) and (counts > 0).all():
            converged = True
            break
        assignment = new_assignment
    clusters = ClusterAssignment(assignment, k, "kmeans")
    return KMeansResult(clusters, centers, history, it, converged)
