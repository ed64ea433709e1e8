import itertools
from typing import List

import numpy as np
import pytest

from cropway.fieldgen import GenConfig, Sample, WaypointSet, generate_field
from cropway.model import ModelConfig, build_model

# Three rows at least 12 px apart on a 64×64 grid: 4 waypoints that never share an 8 px cell.
TINY = GenConfig(
    height=64,
    width=64,
    n_range=(3, 3),
    inter_row_range=(12.0, 16.0),
    border_margin=4.0,
    corner_fraction=0.05,
    hole_rate=0.0,
    noise_sigma=0.0,
)


def make_samples(count: int, seed: int = 0, config: GenConfig = TINY) -> List[Sample]:
    samples = []
    for i in range(count):
        grid, waypoints, spec = generate_field(config, seed + i)
        samples.append(Sample(index=i, grid=grid, waypoints=waypoints, meta={"n_rows": spec.n_rows}))
    return samples


def labeled(points, labels, confidences=None) -> WaypointSet:
    return WaypointSet(np.asarray(points, dtype=float), np.asarray(labels), confidences)


def best_partition(cost, n):
    """Exhaustive search over every split of ``n`` items into two non-empty groups."""
    best = None
    for bits in itertools.product((0, 1), repeat=n - 1):
        labels = np.array((0,) + bits)
        if not labels.any():
            continue
        value = cost(labels)
        if best is None or value < best[0]:
            best = (value, labels)
    return best


@pytest.fixture
def tiny_samples() -> List[Sample]:
    return make_samples(4)


@pytest.fixture
def small_model():
    return build_model(ModelConfig(), seed=0)
