import numpy as np
import pytest

from cropway.autograd import DiffTensor, grad_check
from cropway.errors import CheckpointError, ClusteringError, ConfigError, DatasetError, TargetError
from cropway.model import (
    ModelConfig,
    TrainConfig,
    build_model,
    build_target,
    clustering_loss,
    cosine_sim,
    decode_target,
    estimation_loss,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
)
from tests.conftest import labeled, make_samples


def test_parameter_budget(small_model):
    assert 0 < small_model.num_parameters() < 73_000
    assert small_model.num_parameters(trainable_only=False) == small_model.num_parameters()


def test_compression():
    assert ModelConfig(reduction_modules=2).compression == 8
    assert ModelConfig(reduction_modules=1).compression == 4


def test_invalid_config():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(kernel_size=4))
    with pytest.raises(ConfigError):
        build_model(ModelConfig(latent_dim=1))


def test_same_seed_same_weights():
    a, b, c = build_model(seed=7), build_model(seed=7), build_model(seed=8)
    for name, param in a.params.items():
        np.testing.assert_array_equal(param.data, b.params[name].data)
    assert any(not np.array_equal(p.data, c.params[n].data) for n, p in a.params.items())


def test_output_maps_follow_compression(small_model):
    est, latent = forward(small_model, np.zeros((256, 256), dtype=np.uint8))
    assert est.shape == (32, 32, 3)
    assert latent.shape == (32, 32, 3)


@pytest.mark.slow
def test_full_size_grid(small_model):
    est, latent = forward(small_model, np.zeros((800, 800), dtype=np.uint8))
    assert est.shape == (100, 100, 3)
    assert latent.shape == (100, 100, 3)


def test_zero_grid_gives_finite_outputs(small_model):
    est, latent = forward(small_model, np.zeros((64, 64)))
    assert np.all(np.isfinite(est)) and np.all(np.isfinite(latent))
    assert np.all((est[..., 0] > 0) & (est[..., 0] < 1))
    assert np.all(np.abs(est[..., 1:]) < 1)


def test_indivisible_grid_suggests_padding(small_model):
    with pytest.raises(ConfigError, match="pad the grid by 4 rows and 0 columns"):
        forward(small_model, np.zeros((60, 64)))


def test_target_offsets():
    target = build_target(labeled([(6, 3)], [0]), 16, 16, 8)
    np.testing.assert_allclose(target[0, 0], [1.0, 0.5, -0.25])
    assert target[..., 0].sum() == 1

    target = build_target(labeled([(4, 4)], [0]), 16, 16, 8)
    np.testing.assert_allclose(target[0, 0], [1.0, 0.0, 0.0])


def test_target_rejects_collisions_and_outside_points():
    with pytest.raises(TargetError, match="two waypoints"):
        build_target(labeled([(1, 1), (6, 6)], [0, 1]), 16, 16, 8)
    with pytest.raises(TargetError, match="outside"):
        build_target(labeled([(16, 3)], [0]), 16, 16, 8)


def test_target_round_trip():
    rng = np.random.default_rng(0)
    k, size = 8, 800
    cells = rng.choice((size // k) ** 2, size=1000, replace=False)
    rows, cols = np.divmod(cells, size // k)
    points = np.stack([cols * k + rng.uniform(0, k, 1000), rows * k + rng.uniform(0, k, 1000)], axis=1)
    target = build_target(labeled(points, np.zeros(1000, dtype=int)), size, size, k)
    decoded = decode_target(target, k)
    order = np.lexsort((cols, rows))
    np.testing.assert_allclose(decoded, points[order], atol=1e-9)


def test_estimation_loss_cases():
    target = np.zeros((1, 1, 3))
    assert estimation_loss(DiffTensor(target.copy()), target).item() == pytest.approx(0.0)
    assert estimation_loss(DiffTensor(np.array([[[1.0, 0.0, 0.0]]])), target).item() == pytest.approx(0.3)

    positive = np.array([[[1.0, 0.2, -0.4]]])
    pred = DiffTensor(np.array([[[1.0, 0.7, -0.4]]]))
    assert estimation_loss(pred, positive, lam=0.7).item() == pytest.approx(0.175)


def test_clustering_loss_cases():
    orthogonal = DiffTensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert clustering_loss(orthogonal, [0, 1]).item() == pytest.approx(0.6931, abs=1e-4)
    identical = DiffTensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ClusteringError):
        clustering_loss(identical, [0, 0])
    with pytest.raises(ClusteringError):
        clustering_loss(DiffTensor(np.array([[1.0, 0.0]])), [0])


def test_clustering_loss_same_cluster_pair():
    # every pair sits at the lower bound: same-cluster pairs aligned, cross-cluster pairs opposite
    features = DiffTensor(np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]))
    assert clustering_loss(features, [0, 0, 1]).item() == pytest.approx(0.3133, abs=1e-4)


def test_clustering_loss_lower_bound():
    rng = np.random.default_rng(1)
    for _ in range(200):
        features = DiffTensor(rng.normal(size=(6, 3)))
        labels = np.array([0, 1, 0, 1, 1, 0])
        assert clustering_loss(features, labels).item() >= 0.3132


def test_cosine_similarity():
    assert cosine_sim((1, 0), (1, 0)) == pytest.approx(1.0)
    assert cosine_sim((1, 0), (0, 1)) == pytest.approx(0.0)
    assert cosine_sim((1, 0), (-1, 0)) == pytest.approx(-1.0)
    with pytest.raises(ClusteringError):
        cosine_sim((0, 0), (1, 0))


def test_checkpoint_round_trip(tmp_path, small_model):
    path = save_checkpoint(small_model, tmp_path / "model.cway")
    assert path.stat().st_size < 400_000
    loaded = load_checkpoint(path)
    grid = make_samples(1)[0].grid
    for a, b in zip(forward(small_model, grid), forward(loaded, grid)):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_errors(tmp_path, small_model):
    path = save_checkpoint(small_model, tmp_path / "model.cway")
    data = path.read_bytes()

    (tmp_path / "magic.cway").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.cway")

    (tmp_path / "short.cway").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.cway")

    (tmp_path / "long.cway").write_bytes(data + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "long.cway")

    small_model.params["estimation/output/offset"] = small_model.params.pop("estimation/output/bias")
    save_checkpoint(small_model, tmp_path / "renamed.cway")
    with pytest.raises(CheckpointError, match="unknown tensor"):
        load_checkpoint(tmp_path / "renamed.cway")


@pytest.mark.parametrize("seed", [0] + [pytest.param(s, marks=pytest.mark.slow) for s in range(1, 20)])
def test_losses_pass_gradient_check_through_network(seed):
    model = build_model(seed=seed, dtype=np.float64)
    sample = make_samples(1, seed=seed + 100)[0]
    target = build_target(sample.waypoints, 64, 64, model.compression)
    cells = np.floor(sample.waypoints.points / model.compression).astype(int)

    def estimation(_):
        est, _latent = model(sample.grid)
        return estimation_loss(est[0], target)

    def clustering(_):
        _est, latent = model(sample.grid)
        return clustering_loss(latent[0][cells[:, 1], cells[:, 0]], sample.waypoints.labels)

    for name in ("backbone/stem/kernel", "backbone/res1/channel_attention/hidden/weights", "estimation/output/kernel"):
        assert grad_check(estimation, model.params[name], samples=4, seed=seed) < 1e-4, name
    for name in ("backbone/up/kernel", "clustering/conv0/kernel", "clustering/latent/kernel"):
        assert grad_check(clustering, model.params[name], samples=4, seed=seed) < 1e-4, name


def test_clustering_phase_keeps_backbone(small_model):
    before = {n: p.data.copy() for n, p in small_model.parameters("backbone").items()}
    heads = {n: p.data.copy() for n, p in small_model.parameters("clustering").items()}
    train(small_model, make_samples(2), TrainConfig(phase="clustering", epochs=1, batch_size=2, lr=1e-2))
    for name, data in before.items():
        np.testing.assert_array_equal(small_model.params[name].data, data)
    assert any(not np.array_equal(small_model.params[n].data, d) for n, d in heads.items())


def test_history_has_one_loss_per_epoch(small_model):
    _, history = train(small_model, make_samples(3), TrainConfig(epochs=2, batch_size=2))
    assert len(history.estimation) == 2
    assert len(history.clustering) == 2
    assert [row[:2] for row in history.rows()][:3] == [("estimation", 1), ("estimation", 2), ("clustering", 1)]
    assert not any(m for m in small_model.frozen.values())


def test_training_is_deterministic():
    samples = make_samples(2)
    config = TrainConfig(epochs=1, batch_size=1, phase="estimation", seed=4)
    a, history_a = train(build_model(seed=1), samples, config)
    b, history_b = train(build_model(seed=1), samples, config)
    assert history_a.estimation == history_b.estimation
    for name, param in a.params.items():
        np.testing.assert_array_equal(param.data, b.params[name].data)


def test_empty_dataset(small_model):
    with pytest.raises(DatasetError):
        train(small_model, [])


def test_loss_csv(tmp_path, small_model):
    _, history = train(small_model, make_samples(1), TrainConfig(epochs=1, phase="estimation", count_limit=1))
    path = history.to_csv(tmp_path / "loss.csv", {"command": "train", "seed": 0})
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# run_config: ")
    assert lines[1] == "phase,epoch,loss"
    assert lines[2].startswith("estimation,1,")


@pytest.mark.slow
def test_overfit_drives_estimation_loss_down():
    samples = make_samples(8, seed=100)
    model = build_model(seed=0)
    _, history = train(model, samples, TrainConfig(epochs=150, batch_size=8, lr=3e-3, phase="estimation"))
    assert history.estimation[-1] < 0.1 * history.estimation[0]
