"""Density-based pseudo-labels for contrastive training.

Exact DBSCAN with a brute-force neighbour search: the clustering only ever
runs on a small downsample, so there is no spatial index.
"""
from __future__ import annotations

from collections import deque

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array

from .errors import NoisePairRejected

NOISE = -1
_BLOCK = 1024


def _neighbourhoods(X: np.ndarray, eps: float):
    """Index arrays of all points within ``eps`` (inclusive, self included)."""
    out = []
    sq = np.einsum("ij,ij->i", X, X)
    for start in range(0, len(X), _BLOCK):
        block = X[start:start + _BLOCK]
        d2 = sq[start:start + _BLOCK, None] - 2.0 * block @ X.T + sq[None, :]
        # the expansion can go slightly negative or shift by rounding; settle
        # borderline pairs with the direct difference
        close = d2 <= (eps * eps) * (1 + 1e-9) + 1e-12
        for row, mask in enumerate(close):
            cand = np.flatnonzero(mask)
            diff = X[cand] - block[row]
            dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            out.append(cand[dist <= eps])
    return out


def dbscan(points, eps: float = 0.3, min_pts: int = 10):
    """Cluster ``points``; returns ``(labels, core_mask)``.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Clusters are numbered 0.. in discovery order while scanning
    the points by index; a border point joins the first cluster whose
    expansion reaches it. Everything else is ``NOISE`` (-1).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be at least 1")
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=bool)
    X = X.reshape(n, -1)
    neigh = _neighbourhoods(X, eps)
    core = np.array([len(nb) >= min_pts for nb in neigh])
    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in neigh[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return labels, core


def pair_label(label_i: int, label_j: int) -> int:
    """0 for a same-cluster pair, 1 otherwise. Noise may not be paired."""
    if label_i == NOISE or label_j == NOISE:
        raise NoisePairRejected(f"noise sample in pair ({label_i}, {label_j})")
    return 0 if label_i == label_j else 1


def k_distance(points, k: int) -> np.ndarray:
    """Sorted (descending) distance of each point to its k-th nearest neighbour, self included.

    Meant for picking ``eps`` by eye; nothing chooses it automatically.
    """
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if n == 0:
        return np.empty(0)
    k = min(k, n)
    out = np.empty(n)
    sq = np.einsum("ij,ij->i", X, X)
    for start in range(0, n, _BLOCK):
        block = X[start:start + _BLOCK]
        d2 = np.maximum(sq[start:start + _BLOCK, None] - 2.0 * block @ X.T + sq[None, :], 0.0)
        out[start:start + len(block)] = np.sqrt(np.partition(d2, k - 1, axis=1)[:, k - 1])
    return np.sort(out)[::-1]


class DBSCAN(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`dbscan`."""

    def __init__(self, eps=0.3, min_pts=10):
        self.eps = eps
        self.min_pts = min_pts

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=0) if len(X) else np.empty((0, 0))
        self.labels_, core = dbscan(X, self.eps, self.min_pts)
        self.core_sample_indices_ = np.flatnonzero(core)
        self.n_clusters_ = int(self.labels_.max() + 1) if len(self.labels_) else 0
        return self


def write_pseudo_labels(labels, path):
    with open(path, "w") as fh:
        fh.write("index,cluster\n")
        for i, lab in enumerate(labels):
            fh.write(f"{i},{int(lab)}\n")
