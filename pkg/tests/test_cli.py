import json

import pytest
from click.testing import CliRunner
from PIL import Image

from cropway.__main__ import cli, run_eval

SMALL = ["--height", "128", "--width", "128", "--border-margin", "8", "--count", "2,1,1"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    result = runner.invoke(cli, ["generate", "--out", str(root / "data"), *SMALL])
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        cli,
        [
            "train",
            "--data",
            str(root / "data"),
            "--out",
            str(root / "model.bin"),
            "--epochs",
            "1",
            "--batch-size",
            "2",
            "--channels",
            "4",
        ],
    )
    assert result.exit_code == 0, result.output
    return root


def test_generate_writes_dataset(workdir):
    data = workdir / "data"
    with open(data / "manifest.json") as f:
        manifest = json.load(f)
    assert manifest["total"] == 4
    assert manifest["run_config"]["command"] == "generate"
    assert len(list((data / "images").glob("*.png"))) == 4


def test_train_writes_checkpoint_and_history(workdir):
    assert (workdir / "model.bin").stat().st_size > 0
    with open(workdir / "model.bin.json") as f:
        meta = json.load(f)
    assert set(meta) == {"run_config", "model_config", "train_config", "loss_history"}
    assert len(meta["loss_history"]["estimation"]) == 1
    assert (workdir / "model.bin.loss.csv").read_text().count("\n") >= 2


def test_predict(workdir):
    out = workdir / "pred.json"
    result = CliRunner().invoke(
        cli,
        [
            "predict",
            "--checkpoint",
            str(workdir / "model.bin"),
            "--image",
            str(workdir / "data" / "images" / "00000.png"),
            "--out",
            str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    assert "Predicted waypoints" in result.output
    with open(out) as f:
        assert isinstance(json.load(f)["waypoints"], list)


def test_eval_ground_truth_and_baseline(workdir):
    runner = CliRunner()
    out = workdir / "truth.json"
    result = runner.invoke(cli, ["eval", "--data", str(workdir / "data"), "--baseline", "truth", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "AP_2" in result.output
    with open(out) as f:
        assert json.load(f)["run_config"]["command"] == "eval"

    result = runner.invoke(cli, ["eval", "--data", str(workdir / "data"), "--baseline", "kmeans"])
    assert result.exit_code == 0, result.output


def test_eval_model(workdir):
    report = run_eval(workdir / "data", checkpoints=[workdir / "model.bin"])
    assert len(report.runs) == 1
    assert report.metadata["detections"] == "model"


def test_plan_and_render(workdir):
    runner = CliRunner()
    path = workdir / "path.json"
    result = runner.invoke(
        cli, ["plan", "--waypoints", str(workdir / "data" / "labels" / "00000.json"), "--out", str(path)]
    )
    assert result.exit_code == 0, result.output
    with open(path) as f:
        payload = json.load(f)
    assert payload["length"] > 0
    assert {w["segment"] for w in payload["waypoints"]} <= {"intra", "inter"}

    overlay = workdir / "overlay.png"
    result = runner.invoke(
        cli,
        [
            "render",
            "--image",
            str(workdir / "data" / "images" / "00000.png"),
            "--path",
            str(path),
            "--out",
            str(overlay),
        ],
    )
    assert result.exit_code == 0, result.output
    with Image.open(overlay) as img:
        assert img.size == (128, 128)


def test_clustering_phase_needs_checkpoint(workdir):
    result = CliRunner().invoke(
        cli, ["train", "--data", str(workdir / "data"), "--out", str(workdir / "x.bin"), "--phase", "clustering"]
    )
    assert result.exit_code == 2
    assert "--checkpoint" in result.output


def test_bad_inputs_exit_with_usage_code(tmp_path):
    runner = CliRunner()
    result = runner.invoke(cli, ["eval", "--data", str(tmp_path / "missing"), "--baseline", "truth"])
    assert result.exit_code == 2
    result = runner.invoke(cli, ["generate", "--out", str(tmp_path / "data"), "--count", "a,b,c"])
    assert result.exit_code == 2
    assert "--count" in result.output


def run_pipeline(root):
    runner = CliRunner()
    data, model, pred = str(root / "data"), str(root / "model.bin"), str(root / "pred.json")
    commands = [
        ["generate", "--out", data, "--seed", "5", *SMALL],
        ["train", "--data", data, "--out", model, "--epochs", "1", "--batch-size", "2", "--channels", "4"],
        ["predict", "--checkpoint", model, "--image", str(root / "data" / "images" / "00000.png"), "--out", pred],
        ["eval", "--data", data, "--checkpoint", model, "--out", str(root / "eval.json")],
    ]
    for args in commands:
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, result.output
    return {path.relative_to(root): path.read_bytes() for path in sorted(root.rglob("*")) if path.is_file()}


def test_rerun_gives_identical_artifacts(tmp_path):
    first = run_pipeline(tmp_path)
    second = run_pipeline(tmp_path)
    assert len(first) >= 10
    assert first.keys() == second.keys()
    for name, content in first.items():
        assert second[name] == content, name
