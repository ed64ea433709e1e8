"""Geometric clustering baselines: image-space K-means and a DBSCAN pipeline with an angle-based fallback."""
import logging
import math
from dataclasses import dataclass
from typing import Any, Optional, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import KDTree
from scipy.spatial.distance import cdist, pdist, squareform

from cropway.errors import ClusteringError, ConfigError

__all__ = ["NOISE", "DbscanConfig", "kmeans_image", "dbscan", "estimate_row_angle", "dbscan_pipeline"]

logger = logging.getLogger(__name__)

NOISE = -1

#: A projection gap counts as a side split when it is this many times larger than every other gap.
SPLIT_GAP_RATIO = 3.0


@dataclass
class DbscanConfig:
    eps: float = 25.0
    min_pts: int = 2

    def validate(self) -> "DbscanConfig":
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise ConfigError(f"min_pts must be >= 1, got {self.min_pts}")
        return self


def _as_points(points: Any, minimum: int = 0) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < minimum:
        raise ClusteringError(f"need at least {minimum} points, got {len(pts)}")
    return pts


def kmeans_image(points: Any, iters: int = 100) -> np.ndarray:
    """Euclidean 2-means in image coordinates, seeded with the farthest pair of points."""
    pts = _as_points(points, minimum=2)
    dist = squareform(pdist(pts))
    i, j = np.unravel_index(int(np.argmax(dist)), dist.shape)
    centroids = pts[[i, j]].copy()
    labels = np.full(len(pts), -1, dtype=np.int64)
    for _ in range(iters):
        d = cdist(pts, centroids, "sqeuclidean")
        assigned = (d[:, 1] < d[:, 0]).astype(np.int64)
        if np.array_equal(assigned, labels):
            break
        labels = assigned
        for c in (0, 1):
            if np.any(labels == c):
                centroids[c] = pts[labels == c].mean(axis=0)
    return labels


def dbscan(points: Any, config: Optional[DbscanConfig] = None) -> np.ndarray:
    """Density clustering; a point's ε-neighbourhood includes itself.

    Core points within ε of each other form clusters, border points join their
    nearest core point, everything else is ``NOISE``. Cluster ids follow the
    lexicographic order of each cluster's smallest point, so shuffling the input
    does not change the result.
    """
    config = (config or DbscanConfig()).validate()
    pts = _as_points(points)
    labels = np.full(len(pts), NOISE, dtype=np.int64)
    if not len(pts):
        return labels

    tree = KDTree(pts)
    neighbours = tree.query_ball_point(pts, config.eps)
    core = np.array([len(n) >= config.min_pts for n in neighbours])
    core_idx = np.flatnonzero(core)
    if not len(core_idx):
        return labels

    rows, cols = [], []
    for i in core_idx:
        for j in neighbours[i]:
            if core[j]:
                rows.append(i)
                cols.append(j)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(pts), len(pts)))
    _, components = connected_components(graph, directed=False)
    labels[core_idx] = components[core_idx]

    for i in np.flatnonzero(~core):
        near_core = [j for j in neighbours[i] if core[j]]
        if near_core:
            d = np.linalg.norm(pts[near_core] - pts[i], axis=1)
            # ties go to the lexicographically smallest core point
            best = min(zip(d, (tuple(pts[j]) for j in near_core), near_core))[2]
            labels[i] = labels[best]

    clustered = np.unique(labels[labels != NOISE])
    anchors = []
    for cid in clustered:
        members = pts[labels == cid]
        anchors.append((tuple(members[np.lexsort((members[:, 1], members[:, 0]))[0]]), cid))
    remap = {cid: new for new, (_, cid) in enumerate(sorted(anchors))}
    out = labels.copy()
    for cid, new in remap.items():
        out[labels == cid] = new
    return out


def _side_split(projection: np.ndarray) -> Optional[np.ndarray]:
    """Boolean mask of the upper group when one gap in ``projection`` dominates all others."""
    order = np.argsort(projection, kind="stable")
    gaps = np.diff(projection[order])
    if not len(gaps):
        return None
    k = int(np.argmax(gaps))
    biggest = gaps[k]
    others = np.delete(gaps, k)
    rest = float(others.max()) if len(others) else 0.0
    if biggest <= 0 or biggest <= SPLIT_GAP_RATIO * rest:
        return None
    return projection > projection[order[k]]


def _wrap_angle(angle: float) -> float:
    return (angle + math.pi / 2) % math.pi - math.pi / 2


def _principal_axes(pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    centered = pts - pts.mean(axis=0)
    _, vectors = np.linalg.eigh(centered.T @ centered)
    return vectors[:, 1], vectors[:, 0]


def estimate_row_angle(points: Any) -> float:
    """Row direction α̂ in [-π/2, π/2), orthogonal to the cross-row axis.

    The cross-row axis is the first principal direction unless the cloud splits
    into two separated groups along one principal direction, which then is the
    row direction and is refined as the direction between the two group means.
    """
    pts = _as_points(points, minimum=2)
    if np.allclose(pts, pts[0]):
        raise ClusteringError("cannot estimate a row angle from collocated points")
    first, second = _principal_axes(pts)
    for axis in (first, second):
        upper = _side_split(pts @ axis)
        if upper is not None:
            between = pts[upper].mean(axis=0) - pts[~upper].mean(axis=0)
            return _wrap_angle(math.atan2(between[1], between[0]))
    return _wrap_angle(math.atan2(second[1], second[0]))


def dbscan_pipeline(points: Any, config: Optional[DbscanConfig] = None) -> np.ndarray:
    """Two-way labeling: DBSCAN when it finds exactly two clusters, otherwise a median split along the rows."""
    pts = _as_points(points, minimum=2)
    ids = dbscan(pts, config)
    clusters = np.unique(ids[ids != NOISE])
    if len(clusters) == 2:
        labels = ids.copy()
        noise = np.flatnonzero(ids == NOISE)
        if len(noise):
            members = np.flatnonzero(ids != NOISE)
            nearest = np.argmin(cdist(pts[noise], pts[members]), axis=1)
            labels[noise] = ids[members[nearest]]
        return labels

    logger.debug("DBSCAN found %d clusters, falling back to the row-angle split", len(clusters))
    alpha = estimate_row_angle(pts)
    along = pts @ np.array([math.cos(alpha), math.sin(alpha)])
    return (along > np.median(along)).astype(np.int64)
