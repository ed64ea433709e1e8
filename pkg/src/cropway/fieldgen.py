"""Synthetic row-crop occupancy grids with ground-truth waypoints, and the on-disk dataset format.

A field is a set of parallel rows at angle α, clipped by a random convex border,
optionally bent into quadratic Bézier curves, rasterized as thick strokes and
perforated with holes. Waypoints sit halfway between the ends of adjacent rows:
cluster 0 (A) on the side where rows start, cluster 1 (B) where they end.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from cropway.config import derive_seed, to_jsonable, worker_count, write_json
from cropway.errors import ConfigError, DatasetError, ShapeError

__all__ = [
    "SPLITS",
    "UNLABELED",
    "GenConfig",
    "HoleStats",
    "RowSpec",
    "FieldSpec",
    "WaypointSet",
    "Sample",
    "generate_field",
    "bezier_point",
    "row_samples",
    "rasterize_row",
    "carve_holes",
    "generate_dataset",
    "load_dataset",
    "read_grid",
    "write_grid",
]

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
UNLABELED = -1

#: Maximum spacing between consecutive curve samples, in pixels.
SAMPLE_STEP = 0.5
MAX_ATTEMPTS = 64


@dataclass
class HoleStats:
    rate: float = 2.0
    length_range: Tuple[float, float] = (3.0, 15.0)
    #: Upper bound on the carved share of a row's length.
    max_fraction: float = 0.4


@dataclass
class GenConfig:
    height: int = 800
    width: int = 800
    n_range: Tuple[int, int] = (10, 50)
    angle_range: Tuple[float, float] = (-math.pi / 2, math.pi / 2)
    radius_range: Tuple[float, float] = (1.0, 2.0)
    inter_row_range: Tuple[float, float] = (8.0, 16.0)
    hole_rate: float = 2.0
    hole_length_range: Tuple[float, float] = (3.0, 15.0)
    noise_sigma: float = 1.5
    curved: bool = False
    mixed: bool = False
    curvature_range: Tuple[float, float] = (-0.15, 0.15)
    border_margin: float = 40.0
    corner_fraction: float = 0.1
    angle: Optional[float] = None
    n_rows: Optional[int] = None

    @property
    def holes(self) -> HoleStats:
        return HoleStats(rate=self.hole_rate, length_range=self.hole_length_range)

    def validate(self) -> "GenConfig":
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"image must be at least 32×32, got {self.height}×{self.width}")
        ranges = ("n_range", "angle_range", "radius_range", "inter_row_range", "hole_length_range", "curvature_range")
        for name in ranges:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} lower bound {lo} exceeds upper bound {hi}")
        if self.n_range[0] < 2:
            raise ConfigError(f"a field needs at least 2 rows, n_range starts at {self.n_range[0]}")
        if self.n_rows is not None and self.n_rows < 2:
            raise ConfigError(f"n_rows must be >= 2, got {self.n_rows}")
        if self.radius_range[0] <= 0:
            raise ConfigError(f"row radius must be positive, got {self.radius_range}")
        if self.inter_row_range[0] <= 0:
            raise ConfigError(f"inter-row spacing must be positive, got {self.inter_row_range}")
        if self.hole_rate < 0 or self.noise_sigma < 0 or self.border_margin < 0:
            raise ConfigError("hole_rate, noise_sigma and border_margin must be non-negative")
        if not 0 <= self.corner_fraction < 0.5:
            raise ConfigError(f"corner_fraction must lie in [0, 0.5), got {self.corner_fraction}")
        return self


@dataclass
class RowSpec:
    start: np.ndarray
    control: np.ndarray
    end: np.ndarray
    radius: float
    offset: float
    #: Displacement noise added to each curve sample, one row per sample.
    jitter: Optional[np.ndarray] = None


@dataclass
class FieldSpec:
    n_rows: int
    angle: float
    curved: bool
    border: np.ndarray
    rows: List[RowSpec] = field(default_factory=list)

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])


@dataclass
class WaypointSet:
    """Image-frame points (x right, y down) with cluster labels and optional confidences."""

    points: np.ndarray
    labels: np.ndarray
    confidences: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size != len(self.points):
            raise ShapeError(f"{len(self.points)} points but {self.labels.size} labels")
        if self.confidences is not None:
            self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
            if self.confidences.size != len(self.points):
                raise ShapeError(f"{len(self.points)} points but {self.confidences.size} confidences")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "WaypointSet":
        return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(0))

    def to_json(self) -> List[Dict[str, Any]]:
        out = []
        for i, (x, y) in enumerate(self.points):
            item: Dict[str, Any] = {"x": float(x), "y": float(y), "cluster": int(self.labels[i])}
            if self.confidences is not None:
                item["confidence"] = float(self.confidences[i])
            out.append(item)
        return out

    @classmethod
    def from_json(cls, items: Sequence[Mapping[str, Any]]) -> "WaypointSet":
        if not items:
            return cls.empty()
        points = [(float(w["x"]), float(w["y"])) for w in items]
        labels = [int(w.get("cluster", UNLABELED)) for w in items]
        confidences = None
        if all("confidence" in w for w in items):
            confidences = [float(w["confidence"]) for w in items]
        return cls(np.array(points), np.array(labels), confidences)


@dataclass
class Sample:
    index: int
    grid: np.ndarray
    waypoints: WaypointSet
    meta: Dict[str, Any] = field(default_factory=dict)


# Geometry


def bezier_point(p0: Any, p1: Any, p2: Any, t: Any) -> np.ndarray:
    """(1−t)²P0 + 2(1−t)t·P1 + t²P2; a vector ``t`` gives one row per value."""
    p0, p1, p2 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2))
    t_arr = np.asarray(t, dtype=np.float64)
    s = t_arr[..., None]
    return (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s**2 * p2


def sample_count(start: np.ndarray, control: np.ndarray, end: np.ndarray) -> int:
    """Number of curve samples keeping consecutive samples at most ``SAMPLE_STEP`` apart."""
    control_length = np.linalg.norm(control - start) + np.linalg.norm(end - control)
    return max(2, int(math.ceil(control_length / SAMPLE_STEP)) + 1)


def row_samples(row: RowSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Curve samples, displaced by the row jitter, and the cumulative arc length of the clean curve."""
    count = sample_count(row.start, row.control, row.end)
    points = bezier_point(row.start, row.control, row.end, np.linspace(0.0, 1.0, count))
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    if row.jitter is not None:
        points = points + row.jitter
    return points, arc


def rasterize_row(samples: Any, radius: float, grid: np.ndarray, value: int = 1) -> np.ndarray:
    """Set every pixel whose center lies within ``radius`` of a sample; pixel (row i, col j) is at (x=j, y=i)."""
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if not len(pts):
        return grid
    h, w = grid.shape
    reach = int(math.ceil(radius))
    base = np.floor(pts).astype(np.int64)
    r2 = radius * radius
    for oy in range(-reach, reach + 2):
        for ox in range(-reach, reach + 2):
            px = base[:, 0] + ox
            py = base[:, 1] + oy
            inside = (px - pts[:, 0]) ** 2 + (py - pts[:, 1]) ** 2 <= r2
            inside &= (px >= 0) & (px < w) & (py >= 0) & (py < h)
            grid[py[inside], px[inside]] = value
    return grid


def _chord(base: np.ndarray, direction: np.ndarray, polygon: np.ndarray) -> Tuple[float, float]:
    """Parameters (t_min, t_max) where the line base + t·direction leaves the convex polygon."""
    ts = []
    for v0, v1 in zip(polygon, np.roll(polygon, -1, axis=0)):
        edge = v1 - v0
        denom = direction[0] * edge[1] - direction[1] * edge[0]
        if abs(denom) < 1e-12:
            continue
        rel = v0 - base
        t = (rel[0] * edge[1] - rel[1] * edge[0]) / denom
        s = (rel[0] * direction[1] - rel[1] * direction[0]) / denom
        if -1e-9 <= s <= 1 + 1e-9:
            ts.append(t)
    if len(ts) < 2:
        raise ConfigError("row line does not cross the field border")
    return min(ts), max(ts)


def _random_border(rng: np.random.Generator, config: GenConfig) -> Tuple[np.ndarray, float]:
    """Convex quadrilateral with one vertex per corner zone, and the half-size of the square it surely contains."""
    h, w, m = config.height, config.width, config.border_margin
    zx, zy = config.corner_fraction * w, config.corner_fraction * h
    jitter = rng.uniform(0.0, 1.0, size=(4, 2)) * (zx, zy)
    border = np.array(
        [
            [m + jitter[0, 0], m + jitter[0, 1]],
            [w - m - jitter[1, 0], m + jitter[1, 1]],
            [w - m - jitter[2, 0], h - m - jitter[2, 1]],
            [m + jitter[3, 0], h - m - jitter[3, 1]],
        ]
    )
    inner = min(w / 2 - m - zx, h / 2 - m - zy)
    if inner <= 0:
        raise ConfigError(f"border margin {m} leaves no room for rows in a {w}×{h} image")
    return border, inner


def _row_offsets(rng: np.random.Generator, n: int, config: GenConfig, span: float) -> np.ndarray:
    """Centered perpendicular offsets of the rows, spacing within ``inter_row_range`` and total extent <= span."""
    lo, hi = config.inter_row_range
    spacings = rng.uniform(lo, hi, size=max(n - 1, 0))
    feasible = int(span // lo) + 1
    if n > feasible:
        logger.debug("Reducing %d rows to %d to fit a %.1f px span", n, feasible, span)
        n = feasible
        spacings = spacings[: n - 1]
    if n < 2:
        raise ConfigError(f"no feasible rows: span {span:.1f} px cannot hold two rows {lo} px apart")
    if spacings.sum() > span:
        excess = spacings - lo
        spacings = lo + excess * (span - lo * (n - 1)) / excess.sum()
    offsets = np.concatenate([[0.0], np.cumsum(spacings)])
    return offsets - offsets[-1] / 2


def generate_field(config: Optional[GenConfig] = None, seed: int = 0) -> Tuple[np.ndarray, WaypointSet, FieldSpec]:
    """Occupancy grid (uint8 in {0,1}), its waypoints and the geometry that produced them."""
    config = (config or GenConfig()).validate()
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width

    angle = float(rng.uniform(*config.angle_range))
    if config.angle is not None:
        angle = float(config.angle)
    n = int(rng.integers(config.n_range[0], config.n_range[1] + 1))
    if config.n_rows is not None:
        n = config.n_rows
    coin = rng.random()
    curved = config.curved or (config.mixed and coin < 0.5)

    border, inner = _random_border(rng, config)
    offsets = _row_offsets(rng, n, config, 2 * inner)
    direction = np.array([math.cos(angle), math.sin(angle)])
    normal = np.array([-direction[1], direction[0]])
    center = np.array([w / 2, h / 2])

    bend = 0.0
    if curved:
        bend = float(rng.uniform(*config.curvature_range))

    sigma = config.noise_sigma
    spec = FieldSpec(n_rows=len(offsets), angle=angle, curved=curved, border=border)
    for offset in offsets:
        base = center + offset * normal
        t0, t1 = _chord(base, direction, border)
        # endpoint noise only moves along the row and inward, so rows stay inside the border
        t0 += abs(rng.normal(0.0, sigma)) if sigma else 0.0
        t1 -= abs(rng.normal(0.0, sigma)) if sigma else 0.0
        start, end = base + t0 * direction, base + t1 * direction
        control = (start + end) / 2
        if curved:
            length = t1 - t0
            control = control + bend * length * rng.uniform(0.95, 1.05) * normal
            if sigma:
                control = control + rng.normal(0.0, sigma, size=2)
        radius = float(rng.uniform(*config.radius_range))
        jitter = rng.normal(0.0, sigma, size=(sample_count(start, control, end), 2)) if sigma else None
        spec.rows.append(
            RowSpec(start=start, control=control, end=end, radius=radius, offset=float(offset), jitter=jitter)
        )

    grid = np.zeros((h, w), dtype=np.uint8)
    for row in spec.rows:
        rasterize_row(row_samples(row)[0], row.radius, grid)
    grid = carve_holes(grid, spec, config.holes, int(rng.integers(0, 2**32 - 1)))

    starts = np.array([row.start for row in spec.rows])
    ends = np.array([row.end for row in spec.rows])
    side_a = (starts[:-1] + starts[1:]) / 2
    side_b = (ends[:-1] + ends[1:]) / 2
    waypoints = WaypointSet(
        np.concatenate([side_a, side_b]),
        np.concatenate([np.zeros(len(side_a), dtype=np.int64), np.ones(len(side_b), dtype=np.int64)]),
    )
    return grid, waypoints, spec


def carve_holes(grid: np.ndarray, spec: FieldSpec, stats: Optional[HoleStats] = None, seed: int = 0) -> np.ndarray:
    """Copy of ``grid`` with Poisson-many arc intervals of every row cleared."""
    stats = stats or HoleStats()
    out = grid.copy()
    if stats.rate <= 0:
        return out
    rng = np.random.default_rng(seed)
    for row in spec.rows:
        points, arc = row_samples(row)
        total = arc[-1]
        budget = stats.max_fraction * total
        clear_radius = row.radius + 1
        carved = 0.0
        for _ in range(rng.poisson(stats.rate)):
            length = rng.uniform(*stats.length_range)
            start = rng.uniform(0.0, max(total - length, 0.0))
            cost = length + 2 * clear_radius
            if carved + cost > budget:
                continue
            carved += cost
            hole = points[(arc >= start) & (arc <= start + length)]
            rasterize_row(hole, clear_radius, out, value=0)
    return out


# Dataset files


def write_grid(grid: np.ndarray, path: Union[str, Path], pnginfo: Any = None) -> Path:
    """8-bit grayscale PNG, occupied pixels at 255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray((np.asarray(grid) > 0).astype(np.uint8) * 255)
    image.save(path, format="PNG", pnginfo=pnginfo)
    return path


def read_grid(path: Union[str, Path]) -> np.ndarray:
    """Occupancy grid from a grayscale PNG, pixels above 127 occupied."""
    try:
        with Image.open(path) as image:
            pixels = np.asarray(image.convert("L"))
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read occupancy grid {path}: {e}") from e
    return (pixels > 127).astype(np.uint8)


def _split_counts(counts: Union[Mapping[str, int], Sequence[int]]) -> Dict[str, int]:
    if isinstance(counts, Mapping):
        resolved = {split: int(counts.get(split, 0)) for split in SPLITS}
    else:
        if len(counts) != len(SPLITS):
            raise ConfigError(f"expected {len(SPLITS)} split counts (train, val, test), got {len(counts)}")
        resolved = {split: int(c) for split, c in zip(SPLITS, counts)}
    if any(c < 0 for c in resolved.values()):
        raise ConfigError(f"split counts must be non-negative, got {resolved}")
    return resolved


def _cells_distinct(waypoints: WaypointSet, cell_size: int) -> bool:
    cells = np.floor(waypoints.points / cell_size).astype(np.int64)
    return len(np.unique(cells, axis=0)) == len(cells)


def _generate_one(
    config: GenConfig,
    generation_seed: int,
    index: int,
    cell_size: int,
    out_dir: Path,
    run_config: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    for attempt in range(MAX_ATTEMPTS):
        seed = derive_seed(generation_seed, "generation", index, attempt)
        grid, waypoints, spec = generate_field(config, seed)
        if _cells_distinct(waypoints, cell_size):
            break
        logger.debug("Image %d attempt %d has two waypoints in one %d px cell, retrying", index, attempt, cell_size)
    else:
        raise DatasetError(f"image {index}: no field without cell collisions after {MAX_ATTEMPTS} attempts")

    info = PngInfo()
    if run_config is not None:
        info.add_text("run_config", json.dumps(to_jsonable(run_config), sort_keys=True))
    write_grid(grid, out_dir / "images" / f"{index:05d}.png", info)
    label = {
        "waypoints": waypoints.to_json(),
        "n_rows": spec.n_rows,
        "curved": spec.curved,
        "seed": seed,
        "angle": spec.angle,
        "run_config": run_config,
    }
    write_json(label, out_dir / "labels" / f"{index:05d}.json")
    return {"index": index, "curved": spec.curved, "n_rows": spec.n_rows}


def generate_dataset(
    config: Optional[GenConfig],
    counts: Union[Mapping[str, int], Sequence[int]],
    seed: int,
    out_dir: Union[str, Path],
    cell_size: int = 8,
    run_config: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Write ``images/``, ``labels/`` and ``manifest.json``; images are numbered across splits in order."""
    config = (config or GenConfig()).validate()
    if config.height % cell_size or config.width % cell_size:
        raise ConfigError(f"image {config.height}×{config.width} is not divisible by cell size {cell_size}")
    splits = _split_counts(counts)
    out_dir = Path(out_dir)
    generation_seed = derive_seed(seed, "generation")

    total = sum(splits.values())
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(
            pool.map(lambda i: _generate_one(config, generation_seed, i, cell_size, out_dir, run_config), range(total))
        )

    layout, start = {}, 0
    for split in SPLITS:
        layout[split] = {"start": start, "count": splits[split]}
        start += splits[split]
    manifest = {
        "format": "cropway-dataset",
        "version": 1,
        "seed": seed,
        "generation_seed": generation_seed,
        "cell_size": cell_size,
        "total": total,
        "curved_count": sum(1 for r in results if r["curved"]),
        "splits": layout,
        "config": to_jsonable(asdict(config)),
        "run_config": run_config,
    }
    write_json(manifest, out_dir / "manifest.json")
    logger.info("Wrote %d images to %s", total, out_dir)
    return manifest


def _load_sample(out_dir: Path, index: int, label_path: Path) -> Sample:
    image_path = out_dir / "images" / f"{label_path.stem}.png"
    if not image_path.exists():
        raise DatasetError(f"label {label_path} has no matching image {image_path}")
    try:
        with open(label_path, encoding="utf-8") as f:
            label = json.load(f)
        waypoints = WaypointSet.from_json(label["waypoints"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"cannot read label file {label_path}: {e}") from e
    meta = {k: v for k, v in label.items() if k != "waypoints"}
    return Sample(index=index, grid=read_grid(image_path), waypoints=waypoints, meta=meta)


def load_dataset(path: Union[str, Path], split: Optional[str] = None) -> List[Sample]:
    """Samples of one split, or every image/label pair when there is no manifest."""
    out_dir = Path(path)
    if not out_dir.is_dir():
        raise DatasetError(f"dataset directory {out_dir} does not exist")
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
        layout = manifest.get("splits", {})
        if split is None:
            indices = range(int(manifest.get("total", 0)))
        elif split in layout:
            indices = range(layout[split]["start"], layout[split]["start"] + layout[split]["count"])
        else:
            raise DatasetError(f"split {split!r} not in manifest, available: {sorted(layout)}")
        samples = [_load_sample(out_dir, i, out_dir / "labels" / f"{i:05d}.json") for i in indices]
    else:
        if split is not None:
            logger.warning("No manifest in %s, loading every image regardless of split %r", out_dir, split)
        label_paths = sorted((out_dir / "labels").glob("*.json"))
        samples = [_load_sample(out_dir, i, p) for i, p in enumerate(label_paths)]
    if not samples:
        raise DatasetError(f"no samples found in {out_dir}" + (f" for split {split!r}" if split else ""))
    return samples
