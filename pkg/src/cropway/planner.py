"""Full-coverage path over labeled waypoints, alternating intra-row and inter-row legs in A-B-B-A order."""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from cropway.errors import PlanningError
from cropway.fieldgen import WaypointSet

__all__ = ["INTRA", "INTER", "OrderedClusters", "CoveragePath", "order_within_clusters", "plan_coverage", "path_length"]

logger = logging.getLogger(__name__)

INTRA = "intra"
INTER = "inter"


@dataclass
class OrderedClusters:
    """Waypoint indices of each side sorted across the rows; ``a[i]`` and ``b[i]`` bound the same gap."""

    a: List[int]
    b: List[int]
    cross_axis: np.ndarray
    #: Index left over when one side has one waypoint more than the other.
    extra: Optional[int] = None


@dataclass
class CoveragePath:
    points: np.ndarray
    labels: np.ndarray
    #: Kind of the leg leaving each point; the last point carries the leg reaching it.
    segments: List[str]
    indices: List[int] = field(default_factory=list)

    @property
    def length(self) -> float:
        return path_length(self.points)

    def to_json(self) -> Dict[str, Any]:
        waypoints = [
            {"x": float(x), "y": float(y), "cluster": int(c), "segment": s}
            for (x, y), c, s in zip(self.points, self.labels, self.segments)
        ]
        return {"waypoints": waypoints, "length": self.length}


def _cross_axis(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Principal direction of the pooled within-cluster scatter, pointing left of A→B."""
    sides = [points[labels == c] for c in (0, 1)]
    between = sides[1].mean(axis=0) - sides[0].mean(axis=0)
    norm = np.linalg.norm(between)
    if norm == 0:
        raise PlanningError("both clusters have the same centroid, cannot tell the row direction")
    normal = np.array([-between[1], between[0]]) / norm
    centered = np.concatenate([side - side.mean(axis=0) for side in sides])
    scatter = centered.T @ centered
    if np.trace(scatter) == 0:
        # one waypoint per side
        return normal
    _, vectors = np.linalg.eigh(scatter)
    axis = vectors[:, 1]
    return axis if axis @ normal >= 0 else -axis


def _drop_position(longer: np.ndarray, shorter: np.ndarray) -> int:
    """Rank in ``longer`` whose removal best aligns the two projection sequences."""
    costs = [np.abs(np.delete(longer, d) - shorter).sum() for d in range(len(longer))]
    return int(np.argmin(costs))


def order_within_clusters(waypoints: WaypointSet) -> OrderedClusters:
    """Sort both sides along the cross-row axis.

    The cross-row axis is the first principal direction of the waypoints around
    their own cluster centroid, so long rows do not dominate it. A size difference
    of one is tolerated: the waypoint whose removal best aligns the two sides is
    set aside.
    """
    points, labels = waypoints.points, waypoints.labels
    counts = {c: int(np.sum(labels == c)) for c in (0, 1)}
    if not counts[0] or not counts[1]:
        raise PlanningError(f"both clusters need waypoints, got {counts[0]} in A and {counts[1]} in B")
    if set(np.unique(labels).tolist()) - {0, 1}:
        raise PlanningError(f"labels must be 0 or 1, got {sorted(set(labels.tolist()))}")
    if abs(counts[0] - counts[1]) > 1:
        raise PlanningError(
            f"cluster sizes {counts[0]} (A) and {counts[1]} (B) differ by more than one; "
            "the waypoints were probably misclustered upstream"
        )

    axis = _cross_axis(points, labels)
    proj = points @ axis
    a = [int(i) for i in sorted(np.flatnonzero(labels == 0), key=lambda i: (proj[i], i))]
    b = [int(i) for i in sorted(np.flatnonzero(labels == 1), key=lambda i: (proj[i], i))]

    extra = None
    if len(a) != len(b):
        longer, shorter = (a, b) if len(a) > len(b) else (b, a)
        d = _drop_position(proj[longer], proj[shorter])
        extra = longer.pop(d)
        logger.warning(
            "Cluster sizes differ by one (A=%d, B=%d); visiting waypoint %d on its own",
            counts[0],
            counts[1],
            extra,
        )

    pa, pb = proj[a], proj[b]
    for i in range(len(a)):
        if int(np.argmin(np.abs(pb - pa[i]))) != i:
            logger.warning("A waypoint of rank %d is closest to B waypoint of another rank", i)
            break
    return OrderedClusters(a=a, b=b, cross_axis=axis, extra=extra)


def _sequence(ordered: OrderedClusters) -> List[Tuple[int, str]]:
    steps: List[Tuple[int, str]] = []
    for i, (ia, ib) in enumerate(zip(ordered.a, ordered.b)):
        first, second = (ia, ib) if i % 2 == 0 else (ib, ia)
        steps.append((first, INTRA))
        steps.append((second, INTER))
    return steps


def _insert_extra(steps: List[Tuple[int, str]], extra: int, points: np.ndarray, labels: np.ndarray) -> None:
    """Visit ``extra`` right after the nearest waypoint of its own side."""
    same = [k for k, (idx, _) in enumerate(steps) if labels[idx] == labels[extra]]
    k = min(same, key=lambda k: (float(np.linalg.norm(points[steps[k][0]] - points[extra])), k))
    idx, kind = steps[k]
    steps[k] = (idx, INTER)
    steps.insert(k + 1, (extra, kind))


def plan_coverage(waypoints: WaypointSet) -> CoveragePath:
    """A1, B1, B2, A2, A3, B3, ... starting from the A waypoint lowest on the cross-row axis."""
    ordered = order_within_clusters(waypoints)
    steps = _sequence(ordered)
    if ordered.extra is not None:
        _insert_extra(steps, ordered.extra, waypoints.points, waypoints.labels)
    # the last point carries the kind of the leg that reaches it
    if len(steps) > 1:
        steps[-1] = (steps[-1][0], steps[-2][1])
    indices = [idx for idx, _ in steps]
    return CoveragePath(
        points=waypoints.points[indices],
        labels=waypoints.labels[indices],
        segments=[kind for _, kind in steps],
        indices=indices,
    )


def path_length(points: Any) -> float:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
