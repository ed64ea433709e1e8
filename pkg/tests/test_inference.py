import numpy as np
import pytest

from cropway.errors import ClusteringError, ConfigError
from cropway.evaluation import adjusted_accuracy, match_waypoints
from cropway.inference import (
    Candidate,
    DecodeConfig,
    cluster_latent,
    decode_waypoints,
    gather_latent,
    predict,
    suppress,
)
from cropway.model import TrainConfig, build_model, train
from tests.conftest import best_partition, labeled, make_samples


def candidate(x, y, p):
    return Candidate((float(x), float(y)), p, (int(y // 8), int(x // 8)))


def test_decode_cell_center_and_extremes():
    est = np.zeros((4, 5, 3))
    est[0, 0] = (0.9, 0.0, 0.0)
    est[2, 3] = (0.5, -1.0, 1.0)
    est[1, 1] = (0.39, 0.0, 0.0)
    found = decode_waypoints(est, 8, 0.4)
    assert [c.position for c in found] == [(4.0, 4.0), (24.0, 24.0)]
    assert [c.cell for c in found] == [(0, 0), (2, 3)]
    assert [c.confidence for c in found] == [0.9, 0.5]


def test_decode_nothing_above_threshold():
    assert decode_waypoints(np.full((3, 3, 3), 0.1), 8, 0.4) == []


def test_suppress_close_pair():
    kept = suppress([candidate(0, 0, 0.9), candidate(3, 0, 0.8)], 8.0)
    np.testing.assert_array_equal(kept.points, [[0, 0]])


def test_suppress_far_pair():
    kept = suppress([candidate(0, 0, 0.9), candidate(10, 0, 0.8)], 8.0)
    assert len(kept) == 2
    assert np.all(kept.labels == -1)


def test_suppress_chain_is_greedy():
    kept = suppress([candidate(0, 0, 0.9), candidate(6, 0, 0.5), candidate(12, 0, 0.8)], 8.0)
    np.testing.assert_array_equal(kept.points, [[0, 0], [12, 0]])
    np.testing.assert_array_equal(kept.confidences, [0.9, 0.8])


def test_suppress_empty():
    assert len(suppress([], 8.0)) == 0


def test_gather_latent():
    latent = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2)
    np.testing.assert_array_equal(gather_latent(latent, [(4, 4)], 8), [latent[0, 0]])
    same_cell = gather_latent(latent, [(17, 9), (23, 15)], 8)
    np.testing.assert_array_equal(same_cell[0], same_cell[1])
    np.testing.assert_array_equal(same_cell[0], latent[1, 2])


def test_cluster_antipodal_features():
    features = [(1, 0, 0)] * 3 + [(-1, 0, 0)] * 3
    result = cluster_latent(features)
    assert not result.degenerate
    np.testing.assert_array_equal(result.labels, [0, 0, 0, 1, 1, 1])


def test_cluster_ignores_feature_length():
    features = [(5, 0.1), (0.2, 0.01), (-3, 0.3), (-0.1, -0.02)]
    np.testing.assert_array_equal(cluster_latent(features).labels, [0, 0, 1, 1])


def test_cluster_identical_features():
    result = cluster_latent([(0.3, 0.4)] * 4)
    assert result.degenerate
    np.testing.assert_array_equal(result.labels, [0, 0, 0, 0])


def test_cluster_rejects_zero_feature():
    with pytest.raises(ClusteringError):
        cluster_latent([(1, 0), (0, 0)])
    with pytest.raises(ClusteringError):
        cluster_latent([(1, 0)])


def cosine_cost(units):
    def cost(labels):
        return sum(
            (labels == c).sum() - np.linalg.norm(units[labels == c].sum(axis=0)) for c in (0, 1) if (labels == c).any()
        )

    return cost


@pytest.mark.parametrize("seed", range(20))
def test_cluster_finds_the_best_split(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    axis = rng.normal(size=4)
    axis /= np.linalg.norm(axis)
    sides = np.concatenate([[0, 1], rng.integers(0, 2, size=n - 2)])
    features = np.where(sides[:, None] == 0, axis, -axis) + rng.normal(0, 0.2, size=(n, 4))
    features *= rng.uniform(0.5, 3.0, size=(n, 1))

    labels = cluster_latent(features).labels
    units = features / np.linalg.norm(features, axis=1, keepdims=True)
    best_cost, best_labels = best_partition(cosine_cost(units), n)
    assert cosine_cost(units)(labels) == pytest.approx(best_cost)
    assert adjusted_accuracy(labels, best_labels) == 1.0


def test_predict_on_empty_field():
    model = build_model(seed=0)
    result = predict(model, np.zeros((64, 64), dtype=np.uint8), DecodeConfig(t_p=0.4))
    assert result.points.shape[1] == 2
    assert len(result.labels) == len(result)
    assert set(result.labels.tolist()) <= {0, 1}


def test_predict_checks_cell_size():
    with pytest.raises(ConfigError, match="K=8"):
        predict(build_model(seed=0), np.zeros((64, 64)), DecodeConfig(cell_size=4))


def test_decode_config_validation():
    with pytest.raises(ConfigError):
        DecodeConfig(t_p=1.5).validate()
    with pytest.raises(ConfigError):
        DecodeConfig(t_sup=0).validate()


@pytest.mark.slow
def test_overfit_model_finds_training_waypoints():
    samples = make_samples(4, seed=20)
    model, _ = train(build_model(seed=0), samples, TrainConfig(epochs=300, batch_size=4, lr=3e-3))
    for sample in samples:
        found = predict(model, sample.grid)
        matching = match_waypoints(found, labeled(sample.waypoints.points, sample.waypoints.labels), 4.0)
        assert not matching.unmatched_truths
