import math

import numpy as np
import pytest

from cropway.baselines import NOISE, DbscanConfig, dbscan, dbscan_pipeline, estimate_row_angle, kmeans_image
from cropway.errors import ClusteringError, ConfigError
from cropway.evaluation import adjusted_accuracy, clustering_error
from cropway.fieldgen import GenConfig, generate_field
from tests.conftest import best_partition


def two_blobs(seed=0):
    rng = np.random.default_rng(seed)
    left = rng.normal((20, 50), 2.0, size=(6, 2))
    right = rng.normal((120, 55), 2.0, size=(6, 2))
    return np.concatenate([left, right]), np.array([0] * 6 + [1] * 6)


def test_kmeans_splits_blobs():
    points, truth = two_blobs()
    assert adjusted_accuracy(kmeans_image(points), truth) == 1.0


def test_kmeans_needs_two_points():
    with pytest.raises(ClusteringError):
        kmeans_image([(0, 0)])


def test_dbscan_chain_is_one_cluster():
    labels = dbscan([(0, 0), (2, 0), (4, 0)], DbscanConfig(eps=3.0, min_pts=2))
    np.testing.assert_array_equal(labels, [0, 0, 0])


def test_dbscan_isolated_point_is_noise():
    labels = dbscan([(0, 0), (2, 0), (4, 0), (104, 0)], DbscanConfig(eps=3.0, min_pts=2))
    np.testing.assert_array_equal(labels, [0, 0, 0, NOISE])


def test_dbscan_border_point_joins_cluster():
    labels = dbscan([(0, 0), (1, 0), (2, 0), (4.5, 0)], DbscanConfig(eps=2.6, min_pts=3))
    np.testing.assert_array_equal(labels, [0, 0, 0, 0])


def test_dbscan_ignores_input_order():
    points, _ = two_blobs(1)
    labels = dbscan(points)
    permutation = np.random.default_rng(2).permutation(len(points))
    np.testing.assert_array_equal(dbscan(points[permutation]), labels[permutation])
    assert set(labels.tolist()) == {0, 1}
    assert labels[np.argmin(points[:, 0])] == 0


def test_dbscan_config_validation():
    with pytest.raises(ConfigError):
        dbscan([(0, 0)], DbscanConfig(eps=0.0))
    with pytest.raises(ConfigError):
        dbscan([(0, 0)], DbscanConfig(min_pts=0))


def test_vertical_line_gives_horizontal_rows():
    points = [(0.0, float(y)) for y in range(10)]
    assert estimate_row_angle(points) == pytest.approx(0.0, abs=1e-9)


def test_row_angle_from_two_sides():
    rows = np.array([[math.cos(0.3), math.sin(0.3)]]) * 100
    across = np.array([[-math.sin(0.3), math.cos(0.3)]]) * np.arange(0, 60, 12)[:, None]
    points = np.concatenate([across, across + rows])
    assert estimate_row_angle(points) == pytest.approx(0.3, abs=1e-6)


def test_row_angle_of_collocated_points():
    with pytest.raises(ClusteringError):
        estimate_row_angle([(3, 3), (3, 3)])


def test_pipeline_agrees_with_dbscan_on_separated_groups():
    points, truth = two_blobs(3)
    np.testing.assert_array_equal(dbscan_pipeline(points), dbscan(points))
    assert adjusted_accuracy(dbscan_pipeline(points), truth) == 1.0


def test_pipeline_falls_back_to_angle_split():
    side_a = [(0.0, float(y)) for y in range(0, 50, 10)]
    side_b = [(20.0, float(y)) for y in range(0, 50, 10)]
    labels = dbscan_pipeline(side_a + side_b)
    np.testing.assert_array_equal(labels, [0] * 5 + [1] * 5)


@pytest.mark.parametrize("angle", [0.0, 0.3, -0.25])
def test_pipeline_on_straight_fields(angle):
    config = GenConfig(height=256, width=256, border_margin=16.0, angle=angle)
    for seed in range(3):
        _, waypoints, _ = generate_field(config, seed)
        assert adjusted_accuracy(dbscan_pipeline(waypoints.points), waypoints.labels) == 1.0


def squared_error(points):
    def cost(labels):
        return sum(((points[labels == c] - points[labels == c].mean(axis=0)) ** 2).sum() for c in (0, 1))

    return cost


@pytest.mark.parametrize("seed", range(20))
def test_kmeans_finds_the_best_split(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    centers = rng.uniform(0, 400, size=(2, 2))
    while np.linalg.norm(centers[0] - centers[1]) < 100:
        centers = rng.uniform(0, 400, size=(2, 2))
    sides = np.concatenate([[0, 1], rng.integers(0, 2, size=n - 2)])
    points = centers[sides] + rng.normal(0, 5.0, size=(n, 2))

    labels = kmeans_image(points)
    best_cost, best_labels = best_partition(squared_error(points), n)
    assert squared_error(points)(labels) == pytest.approx(best_cost)
    assert adjusted_accuracy(labels, best_labels) == 1.0


def reference_dbscan(points, eps, min_pts):
    """Quadratic DBSCAN over the full distance matrix, clusters numbered from 0."""
    dist = np.linalg.norm(points[:, None] - points[None], axis=2)
    near = dist <= eps
    core = near.sum(axis=1) >= min_pts
    labels = np.full(len(points), NOISE)
    cluster = 0
    for start in np.flatnonzero(core):
        if labels[start] != NOISE:
            continue
        stack = [start]
        labels[start] = cluster
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(near[i] & core):
                if labels[j] == NOISE:
                    labels[j] = cluster
                    stack.append(j)
        cluster += 1
    for i in np.flatnonzero(~core):
        candidates = np.flatnonzero(near[i] & core)
        if len(candidates):
            labels[i] = labels[candidates[np.argmin(dist[i, candidates])]]
    return labels


def same_partition(a, b):
    if not np.array_equal(a == NOISE, b == NOISE):
        return False
    kept = a != NOISE
    together_a = a[kept][:, None] == a[kept][None]
    together_b = b[kept][:, None] == b[kept][None]
    return np.array_equal(together_a, together_b)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("eps, min_pts", [(10.0, 2), (12.0, 4), (20.0, 6)])
def test_dbscan_matches_quadratic_reference(seed, eps, min_pts):
    points = np.random.default_rng(seed).uniform(0, 200, size=(200, 2))
    labels = dbscan(points, DbscanConfig(eps=eps, min_pts=min_pts))
    assert same_partition(labels, reference_dbscan(points, eps, min_pts))


def angle_gap(a, b):
    return abs((a - b + math.pi / 2) % math.pi - math.pi / 2)


@pytest.fixture(scope="module")
def straight_fields():
    return [generate_field(GenConfig(), seed) for seed in range(100)]


def test_row_angle_on_generated_fields(straight_fields):
    for _, waypoints, spec in straight_fields[:50]:
        assert angle_gap(estimate_row_angle(waypoints.points), spec.angle) < math.radians(5)


@pytest.mark.parametrize("theta", [0.4, -1.1, 2.5])
def test_row_angle_follows_rotation(straight_fields, theta):
    rotation = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    for _, waypoints, _ in straight_fields[:10]:
        points = waypoints.points - 400.0
        turned = estimate_row_angle(points @ rotation.T)
        assert angle_gap(turned, estimate_row_angle(points) + theta) < 1e-6


def test_kmeans_separates_every_straight_field(straight_fields):
    for _, waypoints, _ in straight_fields:
        labels = kmeans_image(waypoints.points)
        assert adjusted_accuracy(labels, waypoints.labels) == 1.0
        assert clustering_error(labels, waypoints.labels) == 0
