"""From network outputs to labeled waypoints."""
import logging
from dataclasses import dataclass
from typing import Any, List, Optional, Tuple

import numpy as np

from cropway.errors import ClusteringError, ConfigError
from cropway.fieldgen import UNLABELED, WaypointSet
from cropway.model import Model, forward

__all__ = [
    "DecodeConfig",
    "Candidate",
    "LatentClusters",
    "decode_waypoints",
    "suppress",
    "gather_latent",
    "cluster_latent",
    "predict",
]

logger = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    t_p: float = 0.4
    t_sup: float = 8.0
    kmeans_iters: int = 100
    cell_size: int = 8

    def validate(self) -> "DecodeConfig":
        if not 0 < self.t_p < 1:
            raise ConfigError(f"t_p must lie in (0, 1), got {self.t_p}")
        if self.t_sup <= 0:
            raise ConfigError(f"t_sup must be positive, got {self.t_sup}")
        if self.kmeans_iters < 1:
            raise ConfigError(f"kmeans_iters must be >= 1, got {self.kmeans_iters}")
        if self.cell_size < 1:
            raise ConfigError(f"cell_size must be >= 1, got {self.cell_size}")
        return self


@dataclass
class Candidate:
    position: Tuple[float, float]
    confidence: float
    #: (row, col) of the output cell.
    cell: Tuple[int, int]
    latent: Optional[np.ndarray] = None


@dataclass
class LatentClusters:
    labels: np.ndarray
    #: All features point the same way; every label is 0.
    degenerate: bool = False


def decode_waypoints(est: np.ndarray, k: int, t_p: float) -> List[Candidate]:
    """One candidate per cell with p̂ >= t_p, in row-major cell order."""
    est = np.asarray(est)
    half = k / 2
    rows, cols = np.nonzero(est[..., 0] >= t_p)
    out = []
    for row, col in zip(rows.tolist(), cols.tolist()):
        p, dx, dy = (float(v) for v in est[row, col])
        out.append(Candidate((col * k + half + dx * half, row * k + half + dy * half), p, (row, col)))
    return out


def suppress(candidates: List[Candidate], t_sup: float) -> WaypointSet:
    """Greedy non-maximum suppression: most confident first, reject anything within t_sup of a kept point."""
    if t_sup <= 0:
        raise ConfigError(f"t_sup must be positive, got {t_sup}")
    ranked = sorted(candidates, key=lambda c: (-c.confidence, c.position[1], c.position[0]))
    kept: List[Candidate] = []
    for cand in ranked:
        x, y = cand.position
        if all((x - o.position[0]) ** 2 + (y - o.position[1]) ** 2 > t_sup * t_sup for o in kept):
            kept.append(cand)
    if not kept:
        return WaypointSet.empty()
    return WaypointSet(
        np.array([c.position for c in kept]),
        np.full(len(kept), UNLABELED),
        np.array([c.confidence for c in kept]),
    )


def gather_latent(latent: np.ndarray, points: Any, k: int) -> np.ndarray:
    """Latent vector of the cell holding each point (M×D)."""
    latent = np.asarray(latent)
    pts = points.points if isinstance(points, WaypointSet) else np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cells = np.floor(pts / k).astype(np.int64)
    cols = np.clip(cells[:, 0], 0, latent.shape[1] - 1)
    rows = np.clip(cells[:, 1], 0, latent.shape[0] - 1)
    return latent[rows, cols]


def cluster_latent(features: Any, iters: int = 100) -> LatentClusters:
    """Spherical 2-means seeded with the least similar pair of features."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ClusteringError(f"need at least 2 feature vectors, got shape {feats.shape}")
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ClusteringError(f"zero-norm latent feature at index {int(np.argmin(norms[:, 0]))}")
    units = feats / norms

    sim = units @ units.T
    np.fill_diagonal(sim, np.inf)
    i, j = np.unravel_index(int(np.argmin(sim)), sim.shape)
    if sim[i, j] >= 1 - 1e-12:
        logger.warning("All %d latent features point the same way, returning a single cluster", len(units))
        return LatentClusters(np.zeros(len(units), dtype=np.int64), degenerate=True)

    centroids = units[[i, j]]
    labels = np.full(len(units), -1, dtype=np.int64)
    for _ in range(iters):
        scores = units @ centroids.T
        assigned = (scores[:, 1] > scores[:, 0]).astype(np.int64)
        if np.array_equal(assigned, labels):
            break
        labels = assigned
        for c in (0, 1):
            members = units[labels == c]
            if len(members):
                mean = members.sum(axis=0)
                norm = np.linalg.norm(mean)
                if norm > 0:
                    centroids[c] = mean / norm
    return LatentClusters(labels)


def predict(model: Model, grid: Any, config: Optional[DecodeConfig] = None) -> WaypointSet:
    """Labeled waypoints of one grid from a single forward pass."""
    config = (config or DecodeConfig()).validate()
    k = model.compression
    if config.cell_size != k:
        raise ConfigError(f"decode cell size {config.cell_size} does not match the model's K={k}")
    est, latent = forward(model, grid)
    kept = suppress(decode_waypoints(est, k, config.t_p), config.t_sup)
    if len(kept) == 0:
        return kept
    if len(kept) == 1:
        return WaypointSet(kept.points, np.zeros(1, dtype=np.int64), kept.confidences)
    features = gather_latent(latent, kept, k)
    if not np.all(np.linalg.norm(features, axis=1) > 0):
        logger.warning("Zero latent feature among %d waypoints, labeling all of them as cluster 0", len(kept))
        return WaypointSet(kept.points, np.zeros(len(kept), dtype=np.int64), kept.confidences)
    clusters = cluster_latent(features, config.kmeans_iters)
    return WaypointSet(kept.points, clusters.labels, kept.confidences)
