"""Detection and clustering metrics, and dataset-level evaluation of a predictor."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cropway.baselines import DbscanConfig, dbscan_pipeline, kmeans_image
from cropway.config import worker_count
from cropway.errors import ConfigError, MetricError
from cropway.fieldgen import Sample, WaypointSet
from cropway.inference import DecodeConfig, predict
from cropway.model import Model

__all__ = [
    "DEFAULT_RADII",
    "PREDICTORS",
    "Matching",
    "ImageResult",
    "RunMetrics",
    "EvalReport",
    "Predictor",
    "match_waypoints",
    "average_precision",
    "adjusted_accuracy",
    "clustering_error",
    "evaluate_dataset",
    "model_predictor",
    "baseline_predictor",
    "truth_predictor",
]

logger = logging.getLogger(__name__)

DEFAULT_RADII = (2.0, 3.0, 4.0, 6.0, 8.0)
PREDICTORS = ("model", "kmeans", "dbscan", "truth")
INTERPOLATION = "all-points"

Predictor = Callable[[Sample], WaypointSet]


@dataclass
class Matching:
    #: (prediction index, ground-truth index, distance)
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_predictions: List[int] = field(default_factory=list)
    unmatched_truths: List[int] = field(default_factory=list)


def _confidences(preds: WaypointSet) -> np.ndarray:
    if preds.confidences is None:
        return np.ones(len(preds))
    return preds.confidences


def match_waypoints(preds: WaypointSet, gts: WaypointSet, r: float) -> Matching:
    """Greedy matching, most confident prediction first, each taking its nearest free ground truth within r."""
    if r <= 0:
        raise ConfigError(f"matching radius must be positive, got {r}")
    order = np.argsort(-_confidences(preds), kind="stable")
    free = np.ones(len(gts), dtype=bool)
    matching = Matching()
    for i in order.tolist():
        if free.any():
            dist = np.linalg.norm(gts.points - preds.points[i], axis=1)
            dist[~free] = np.inf
            j = int(np.argmin(dist))
            if dist[j] <= r:
                free[j] = False
                matching.pairs.append((i, j, float(dist[j])))
                continue
        matching.unmatched_predictions.append(i)
    matching.unmatched_truths = np.flatnonzero(free).tolist()
    return matching


def _true_positives(preds: WaypointSet, gts: WaypointSet, r: float) -> np.ndarray:
    flags = np.zeros(len(preds), dtype=bool)
    for i, _, _ in match_waypoints(preds, gts, r).pairs:
        flags[i] = True
    return flags


def _ap_from_flags(confidences: np.ndarray, tp: np.ndarray, n_truths: int) -> float:
    """Area under the monotone precision envelope, one operating point per distinct confidence."""
    if n_truths <= 0:
        raise MetricError("average precision is undefined without ground-truth waypoints")
    if not len(confidences):
        return 0.0
    order = np.argsort(-confidences, kind="stable")
    conf = confidences[order]
    tp_cum = np.cumsum(tp[order])
    ends = np.flatnonzero(np.append(conf[1:] != conf[:-1], True))
    recall = tp_cum[ends] / n_truths
    precision = tp_cum[ends] / (ends + 1)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(preds: WaypointSet, gts: WaypointSet, r: float) -> float:
    return _ap_from_flags(_confidences(preds), _true_positives(preds, gts, r), len(gts))


def _check_labels(pred_labels: Any, gt_labels: Any) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if pred.size != gt.size:
        raise MetricError(f"{pred.size} predicted labels but {gt.size} ground-truth labels")
    if not pred.size:
        raise MetricError("clustering metrics need at least one matched point")
    return pred, gt


def adjusted_accuracy(pred_labels: Any, gt_labels: Any) -> float:
    """2·a − 1 for the better of the two label assignments, clamped to [0, 1]."""
    pred, gt = _check_labels(pred_labels, gt_labels)
    accuracy = float(np.mean(pred == gt))
    return float(np.clip(2 * max(accuracy, 1 - accuracy) - 1, 0.0, 1.0))


def clustering_error(pred_labels: Any, gt_labels: Any) -> int:
    pred, gt = _check_labels(pred_labels, gt_labels)
    wrong = int(np.sum(pred != gt))
    return min(wrong, pred.size - wrong)


# Dataset evaluation


@dataclass
class ImageResult:
    index: int
    n_predictions: int
    n_truths: int
    matched: int
    adjusted_accuracy: Optional[float]
    clustering_error: Optional[int]
    #: Per radius: confidences and true-positive flags of this image's predictions.
    flags: Dict[float, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "n_predictions": self.n_predictions,
            "n_truths": self.n_truths,
            "matched": self.matched,
            "adjusted_accuracy": self.adjusted_accuracy,
            "clustering_error": self.clustering_error,
        }


@dataclass
class RunMetrics:
    ap: Dict[float, float]
    adjusted_accuracy: Optional[float]
    clustering_error: Optional[float]
    images: List[ImageResult]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ap": {_radius_key(r): v for r, v in self.ap.items()},
            "adjusted_accuracy": self.adjusted_accuracy,
            "clustering_error": self.clustering_error,
            "images": [img.to_dict() for img in self.images],
        }


def _radius_key(r: float) -> str:
    return f"{r:g}"


def _mean_std(values: Sequence[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    present = [v for v in values if v is not None]
    if not present:
        return None, None
    std = float(np.std(present, ddof=1)) if len(present) > 1 else 0.0
    return float(np.mean(present)), std


@dataclass
class EvalReport:
    predictor: str
    radii: Tuple[float, ...]
    runs: List[RunMetrics]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def ap(self, r: float) -> Tuple[Optional[float], Optional[float]]:
        return _mean_std([run.ap[r] for run in self.runs])

    @property
    def adjusted_accuracy(self) -> Tuple[Optional[float], Optional[float]]:
        return _mean_std([run.adjusted_accuracy for run in self.runs])

    @property
    def clustering_error(self) -> Tuple[Optional[float], Optional[float]]:
        return _mean_std([run.clustering_error for run in self.runs])

    def to_dict(self) -> Dict[str, Any]:
        def pair(ms: Tuple[Optional[float], Optional[float]]) -> Dict[str, Optional[float]]:
            return {"mean": ms[0], "std": ms[1]}

        return {
            "predictor": self.predictor,
            "radii": list(self.radii),
            "ap": {_radius_key(r): pair(self.ap(r)) for r in self.radii},
            "adjusted_accuracy": pair(self.adjusted_accuracy),
            "clustering_error": pair(self.clustering_error),
            "runs": [run.to_dict() for run in self.runs],
            "metadata": self.metadata,
        }

    def to_table(self) -> str:
        def cell(ms: Tuple[Optional[float], Optional[float]]) -> str:
            return "n/a" if ms[0] is None else f"{ms[0]:.4f} ± {ms[1]:.4f}"

        header = ["predictor"] + [f"AP_{_radius_key(r)}" for r in self.radii] + ["adj. accuracy", "clust. error"]
        row = [self.predictor] + [cell(self.ap(r)) for r in self.radii]
        row += [cell(self.adjusted_accuracy), cell(self.clustering_error)]
        widths = [max(len(h), len(v)) for h, v in zip(header, row)]
        lines = [
            " | ".join(h.ljust(w) for h, w in zip(header, widths)),
            "-+-".join("-" * w for w in widths),
            " | ".join(v.ljust(w) for v, w in zip(row, widths)),
        ]
        return "\n".join(lines)


def _evaluate_image(predictor: Predictor, sample: Sample, radii: Sequence[float], t_sup: float) -> ImageResult:
    preds = predictor(sample)
    gts = sample.waypoints
    conf = _confidences(preds)
    flags = {r: (conf, _true_positives(preds, gts, r)) for r in radii}
    pairs = match_waypoints(preds, gts, t_sup).pairs
    acc: Optional[float] = None
    err: Optional[int] = None
    if pairs:
        pred_labels = [preds.labels[i] for i, _, _ in pairs]
        gt_labels = [gts.labels[j] for _, j, _ in pairs]
        acc = adjusted_accuracy(pred_labels, gt_labels)
        err = clustering_error(pred_labels, gt_labels)
    return ImageResult(sample.index, len(preds), len(gts), len(pairs), acc, err, flags)


def _evaluate_run(predictor: Predictor, samples: Sequence[Sample], radii: Sequence[float], t_sup: float) -> RunMetrics:
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        images = list(pool.map(lambda s: _evaluate_image(predictor, s, radii, t_sup), samples))

    n_truths = sum(img.n_truths for img in images)
    ap = {}
    for r in radii:
        conf = np.concatenate([img.flags[r][0] for img in images])
        tp = np.concatenate([img.flags[r][1] for img in images])
        ap[r] = _ap_from_flags(conf, tp, n_truths)

    accs = [img.adjusted_accuracy for img in images if img.adjusted_accuracy is not None]
    errs = [img.clustering_error for img in images if img.clustering_error is not None]
    if not accs:
        logger.warning(
            "No prediction matched a ground-truth waypoint within %s px, clustering metrics are undefined", t_sup
        )
    return RunMetrics(
        ap=ap,
        adjusted_accuracy=float(np.mean(accs)) if accs else None,
        clustering_error=float(np.mean(errs)) if errs else None,
        images=images,
    )


def evaluate_dataset(
    predictors: Sequence[Predictor],
    dataset: Sequence[Sample],
    config: Optional[DecodeConfig] = None,
    radii: Sequence[float] = DEFAULT_RADII,
    name: str = "model",
) -> EvalReport:
    """AP per radius pooled over the dataset, clustering metrics on predictions matched within t_sup.

    Each predictor is one run (e.g. one checkpoint); the report aggregates mean and
    sample standard deviation across runs.
    """
    config = (config or DecodeConfig()).validate()
    if not predictors:
        raise ConfigError("evaluation needs at least one predictor")
    if not dataset:
        raise MetricError("cannot evaluate an empty dataset")
    radii = tuple(float(r) for r in radii)
    if any(r <= 0 for r in radii):
        raise ConfigError(f"radii must be positive, got {radii}")

    runs = []
    for i, predictor in enumerate(predictors):
        logger.info("Evaluating %s run %d/%d on %d images", name, i + 1, len(predictors), len(dataset))
        runs.append(_evaluate_run(predictor, dataset, radii, config.t_sup))
    metadata = {
        "interpolation": INTERPOLATION,
        "clustering_match_radius": config.t_sup,
        "t_p": config.t_p,
        "images": len(dataset),
        "runs": len(runs),
        "std": "sample (ddof=1) across runs",
    }
    return EvalReport(predictor=name, radii=radii, runs=runs, metadata=metadata)


# Predictors


def model_predictor(model: Model, config: Optional[DecodeConfig] = None) -> Predictor:
    def run(sample: Sample) -> WaypointSet:
        return predict(model, sample.grid, config)

    return run


def truth_predictor() -> Predictor:
    """Ground truth as predictions with confidence 1."""

    def run(sample: Sample) -> WaypointSet:
        gts = sample.waypoints
        return WaypointSet(gts.points, gts.labels, np.ones(len(gts)))

    return run


def baseline_predictor(
    kind: str,
    detector: Optional[Predictor] = None,
    dbscan_config: Optional[DbscanConfig] = None,
    kmeans_iters: int = 100,
) -> Predictor:
    """Relabel the positions found by ``detector`` (ground truth when omitted) with a geometric baseline."""
    if kind not in ("kmeans", "dbscan"):
        raise ConfigError(f"unknown baseline {kind!r}, expected 'kmeans' or 'dbscan'")
    source = detector or truth_predictor()

    def run(sample: Sample) -> WaypointSet:
        found = source(sample)
        if len(found) < 2:
            return WaypointSet(found.points, np.zeros(len(found), dtype=np.int64), found.confidences)
        if kind == "kmeans":
            labels = kmeans_image(found.points, kmeans_iters)
        else:
            labels = dbscan_pipeline(found.points, dbscan_config)
        return WaypointSet(found.points, labels, found.confidences)

    return run
