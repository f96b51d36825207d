"""Deterministic k-means with k-means++ restarts.

Contracts beyond textbook k-means:
  - points are put in canonical (lexicographic) order before anything
    touches an RNG, so results are exactly invariant to input permutation;
  - restart r draws from a stream keyed by (seed, r) only, never by data;
  - equidistant points break ties toward the lowest centroid index;
  - an emptied cluster is re-seeded at the point farthest from that
    centroid's current position;
  - the best restart is picked by inertia (ties: lowest restart index).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientPointsError, InvalidConfigError
from .rng import derive_seed, stream

N_RESTARTS = 10
MAX_ITER = 300
TOL = 1e-6


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray  # K x d
    labels: np.ndarray  # canonical-order labels, n
    sizes: np.ndarray  # K
    inertia: float
    restart_inertias: tuple[float, ...]
    order: np.ndarray  # canonical ordering applied to the input


def _canonical_order(points: np.ndarray) -> np.ndarray:
    # lexicographic by coordinates; first coordinate is the primary key
    return np.lexsort(points.T[::-1])


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)  # argmin returns the lowest index on ties


def _inertia(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(0, n))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(0, n))  # all points coincide with chosen centroids
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    for _ in range(MAX_ITER):
        labels = _assign(points, centroids)
        new = np.empty_like(centroids)
        for j in range(centroids.shape[0]):
            mask = labels == j
            if mask.any():
                new[j] = points[mask].mean(axis=0)
            else:
                far = int(((points - centroids[j]) ** 2).sum(axis=1).argmax())
                new[j] = points[far]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift <= TOL:
            break
    return centroids, _assign(points, centroids)


def kmeans(points: np.ndarray, k: int, seed: int, n_restarts: int = N_RESTARTS) -> KMeansResult:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise InvalidConfigError("points must be an n x d array")
    n = points.shape[0]
    if k < 1:
        raise InvalidConfigError("k must be >= 1")
    if n < k:
        raise InsufficientPointsError(f"{n} points < {k} clusters")

    order = _canonical_order(points)
    pts = points[order]

    if k > 1 and np.all(pts == pts[0]):
        warnings.warn(
            "all points identical with k > 1; duplicate centroids returned",
            stacklevel=2,
        )

    best: tuple[float, int, np.ndarray, np.ndarray] | None = None
    restart_inertias = []
    for r in range(n_restarts):
        rng = stream(derive_seed(seed, 0xC1A5, r))
        init = _plusplus_init(pts, k, rng)
        centroids, labels = _lloyd(pts, init)
        inertia = _inertia(pts, centroids, labels)
        restart_inertias.append(inertia)
        if best is None or inertia < best[0]:
            best = (inertia, r, centroids, labels)

    assert best is not None
    inertia, _, centroids, labels = best
    sizes = np.bincount(labels, minlength=k)
    return KMeansResult(
        centroids=centroids,
        labels=labels,
        sizes=sizes,
        inertia=inertia,
        restart_inertias=tuple(restart_inertias),
        order=order,
    )
