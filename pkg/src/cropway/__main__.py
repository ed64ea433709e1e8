import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import click

from cropway.baselines import DbscanConfig
from cropway.config import RunConfig, write_json
from cropway.errors import ConfigError, CropwayError, DatasetError
from cropway.evaluation import (
    DEFAULT_RADII,
    PREDICTORS,
    EvalReport,
    baseline_predictor,
    evaluate_dataset,
    model_predictor,
    truth_predictor,
)
from cropway.fieldgen import GenConfig, WaypointSet, generate_dataset, load_dataset, read_grid
from cropway.inference import DecodeConfig, predict
from cropway.model import PHASES, ModelConfig, TrainConfig, build_model, load_checkpoint, save_checkpoint, train
from cropway.planner import INTRA, CoveragePath, plan_coverage
from cropway.render import render_overlay, save_overlay

logger = logging.getLogger("cropway")

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class CommandError(click.ClickException):
    exit_code = 2


@contextmanager
def _reported_errors() -> Iterator[None]:
    try:
        yield
    except CropwayError as e:
        logger.error("%s: %s", type(e).__name__, e)
        raise CommandError(str(e)) from e


def _info(message: str, value: Any = "") -> None:
    click.echo(click.style("INFO", fg="green") + ":     " + message + click.style(str(value), bold=True))


def _parse_ints(text: str, what: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as e:
        raise ConfigError(f"{what} must be comma-separated integers, got {text!r}") from e


def _parse_floats(text: str, what: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as e:
        raise ConfigError(f"{what} must be comma-separated numbers, got {text!r}") from e


def _read_waypoints(path: Path) -> WaypointSet:
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        return WaypointSet.from_json(payload["waypoints"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"cannot read waypoints from {path}: {e}") from e


def _read_path(path: Path) -> CoveragePath:
    visited = _read_waypoints(path)
    with open(path, encoding="utf-8") as f:
        segments = [str(w.get("segment", INTRA)) for w in json.load(f)["waypoints"]]
    return CoveragePath(visited.points, visited.labels, segments)


@click.group()
@click.option(
    "--log-level",
    default="WARNING",
    type=click.Choice(LOG_LEVELS, case_sensitive=False),
    help="Verbosity of the library logs",
)
def cli(log_level: str) -> None:
    """Estimate and cluster row-crop waypoints from occupancy grids, and plan coverage paths"""
    logging.basicConfig(level=log_level.upper(), format="%(levelname)s %(name)s: %(message)s")


# generate


@cli.command(help="Generate a synthetic dataset of row-crop occupancy grids with ground-truth waypoints")
@click.option(
    "--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path), help="Dataset directory"
)
@click.option("--count", default="10,2,4", show_default=True, help="Images per split, as train,val,test")
@click.option("--seed", default=0, show_default=True, help="Master seed")
@click.option("--height", default=800, show_default=True, help="Image height in pixels")
@click.option("--width", default=800, show_default=True, help="Image width in pixels")
@click.option("--curved", is_flag=True, help="Bend every row into a quadratic Bézier curve")
@click.option("--mixed", is_flag=True, help="Bend each field with probability 0.5")
@click.option("--n-rows", type=int, default=None, help="Force the number of rows")
@click.option("--angle", type=float, default=None, help="Force the row angle, in radians")
@click.option(
    "--border-margin", default=40.0, show_default=True, help="Distance in pixels between the image edge and the field"
)
@click.option("--cell-size", default=8, show_default=True, help="Output cell size K the waypoints must fit")
def generate(**kwargs: Any) -> None:
    with _reported_errors():
        run_generate(**kwargs)


def run_generate(
    out_dir: Path,
    count: str = "10,2,4",
    seed: int = 0,
    height: int = 800,
    width: int = 800,
    curved: bool = False,
    mixed: bool = False,
    n_rows: Optional[int] = None,
    angle: Optional[float] = None,
    border_margin: float = 40.0,
    cell_size: int = 8,
) -> Dict[str, Any]:
    params = dict(locals())
    counts = _parse_ints(count, "--count")
    config = GenConfig(
        height=height,
        width=width,
        curved=curved,
        mixed=mixed,
        n_rows=n_rows,
        angle=angle,
        border_margin=border_margin,
    )
    run = RunConfig("generate", seed, {**params, "count": counts}).validate()
    manifest = generate_dataset(config, counts, seed, out_dir, cell_size=cell_size, run_config=run.to_dict())
    _info("🌱 Generated ", f"{manifest['total']} images")
    _info("📂 Dataset written to ", out_dir)
    return manifest


# train


@cli.command(name="train", help="Train the waypoint network on a generated or annotated dataset")
@click.option(
    "--data", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path), help="Dataset directory"
)
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Checkpoint to write")
@click.option("--phase", default="both", show_default=True, type=click.Choice(PHASES), help="Training phase")
@click.option(
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Checkpoint to start from, required by the clustering phase",
)
@click.option("--split", default="train", show_default=True, help="Dataset split to train on")
@click.option("--epochs", default=60, show_default=True, help="Epochs per phase")
@click.option("--batch-size", default=16, show_default=True)
@click.option("--lr", default=3e-4, show_default=True, help="Adam learning rate")
@click.option("--lam", default=0.7, show_default=True, help="Weight of waypoint cells in the estimation loss")
@click.option("--count-limit", type=int, default=None, help="Train on the first N images only")
@click.option("--seed", default=0, show_default=True, help="Master seed for initialization and batching")
@click.option("--reduction-modules", default=2, show_default=True, help="Residual reduction modules R")
@click.option("--channels", default=16, show_default=True, help="Channel width C")
@click.option("--kernel-size", default=5, show_default=True)
@click.option("--latent-dim", default=3, show_default=True, help="Latent dimensionality D")
def train_cmd(**kwargs: Any) -> None:
    with _reported_errors():
        run_train(**kwargs)


def run_train(
    data: Path,
    out: Path,
    phase: str = "both",
    checkpoint: Optional[Path] = None,
    split: str = "train",
    epochs: int = 60,
    batch_size: int = 16,
    lr: float = 3e-4,
    lam: float = 0.7,
    count_limit: Optional[int] = None,
    seed: int = 0,
    reduction_modules: int = 2,
    channels: int = 16,
    kernel_size: int = 5,
    latent_dim: int = 3,
) -> Path:
    params = dict(locals())
    if phase == "clustering" and checkpoint is None:
        raise ConfigError("the clustering phase trains on a frozen backbone, pass --checkpoint")
    run = RunConfig("train", seed, params).validate()
    train_config = TrainConfig(
        lam=lam, lr=lr, batch_size=batch_size, epochs=epochs, phase=phase, seed=seed, count_limit=count_limit
    ).validate()

    dataset = load_dataset(data, split)
    _info("📥️ Loaded images: ", len(dataset))
    if checkpoint is not None:
        model = load_checkpoint(checkpoint)
    else:
        model = build_model(ModelConfig(reduction_modules, channels, kernel_size, latent_dim), seed)
    _info("🧮 Trainable parameters: ", model.num_parameters())

    model, history = train(model, dataset, train_config)
    out = Path(out)
    save_checkpoint(model, out)
    history.to_csv(out.with_name(out.name + ".loss.csv"), run.to_dict())
    write_json(
        {
            "run_config": run.to_dict(),
            "model_config": model.config,
            "train_config": train_config,
            "loss_history": {"estimation": history.estimation, "clustering": history.clustering},
        },
        out.with_name(out.name + ".json"),
    )
    _info("💾 Checkpoint written to ", out)
    return out


# predict


@cli.command(name="predict", help="Predict labeled waypoints on one occupancy grid PNG")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Prediction JSON to write")
@click.option("--t-p", default=0.4, show_default=True, help="Confidence threshold")
@click.option("--t-sup", default=8.0, show_default=True, help="Suppression radius in pixels")
@click.option("--kmeans-iters", default=100, show_default=True)
def predict_cmd(**kwargs: Any) -> None:
    with _reported_errors():
        run_predict(**kwargs)


def run_predict(
    checkpoint: Path, image: Path, out: Path, t_p: float = 0.4, t_sup: float = 8.0, kmeans_iters: int = 100
) -> WaypointSet:
    run = RunConfig("predict", None, dict(locals())).validate()
    model = load_checkpoint(checkpoint)
    decode = DecodeConfig(t_p=t_p, t_sup=t_sup, kmeans_iters=kmeans_iters, cell_size=model.compression)
    waypoints = predict(model, read_grid(image), decode)
    write_json({"waypoints": waypoints.to_json(), "run_config": run.to_dict()}, out)
    _info("📍 Predicted waypoints: ", len(waypoints))
    return waypoints


# eval


@cli.command(name="eval", help="Evaluate the network or a geometric baseline on a dataset split")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--split", default="test", show_default=True)
@click.option(
    "--baseline", default="model", show_default=True, type=click.Choice(PREDICTORS), help="Predictor to score"
)
@click.option(
    "--checkpoint",
    "checkpoints",
    multiple=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Checkpoint of one run, repeat for mean ± std across runs; baselines cluster its detections",
)
@click.option("--radii", default=",".join(f"{r:g}" for r in DEFAULT_RADII), show_default=True)
@click.option("--t-p", default=0.4, show_default=True)
@click.option("--t-sup", default=8.0, show_default=True)
@click.option("--eps", default=25.0, show_default=True, help="DBSCAN neighbourhood radius")
@click.option("--min-pts", default=2, show_default=True, help="DBSCAN core point threshold")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Report JSON to write")
def eval_cmd(**kwargs: Any) -> None:
    with _reported_errors():
        report = run_eval(**kwargs)
        click.echo(report.to_table())


def run_eval(
    data: Path,
    split: Optional[str] = "test",
    baseline: str = "model",
    checkpoints: Sequence[Path] = (),
    radii: str = "2,3,4,6,8",
    t_p: float = 0.4,
    t_sup: float = 8.0,
    eps: float = 25.0,
    min_pts: int = 2,
    out: Optional[Path] = None,
) -> EvalReport:
    params = dict(locals())
    params["checkpoints"] = [str(c) for c in checkpoints]
    run = RunConfig("eval", None, params).validate()
    radius_list = _parse_floats(radii, "--radii")
    dataset = load_dataset(data, split)
    models = [load_checkpoint(c) for c in checkpoints]
    cell_size = models[0].compression if models else 8
    decode = DecodeConfig(t_p=t_p, t_sup=t_sup, cell_size=cell_size).validate()

    if baseline == "model" and not models:
        raise ConfigError("evaluating the model needs at least one --checkpoint")
    if baseline == "model":
        predictors = [model_predictor(m, replace(decode, cell_size=m.compression)) for m in models]
    elif baseline == "truth":
        predictors = [truth_predictor()]
    else:
        dbscan_config = DbscanConfig(eps=eps, min_pts=min_pts).validate()
        detectors: List[Any] = [model_predictor(m, replace(decode, cell_size=m.compression)) for m in models] or [None]
        predictors = [baseline_predictor(baseline, d, dbscan_config) for d in detectors]

    report = evaluate_dataset(predictors, dataset, decode, radius_list, name=baseline)
    report.metadata["detections"] = "model" if models else "ground truth"
    if out is not None:
        write_json({**report.to_dict(), "run_config": run.to_dict()}, out)
        _info("📊 Report written to ", out)
    return report


# plan


@cli.command(help="Plan an A-B-B-A coverage path over labeled waypoints")
@click.option(
    "--waypoints",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Prediction or label JSON",
)
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Path JSON to write")
def plan(waypoints: Path, out: Path) -> None:
    with _reported_errors():
        run_plan(waypoints, out)


def run_plan(waypoints: Path, out: Path) -> CoveragePath:
    run = RunConfig("plan", None, {"waypoints": waypoints, "out": out}).validate()
    path = plan_coverage(_read_waypoints(waypoints))
    write_json({**path.to_json(), "run_config": run.to_dict()}, out)
    _info("🚜 Coverage path length (px): ", f"{path.length:.1f}")
    return path


# render


@cli.command(help="Draw waypoints and an optional coverage path over an occupancy grid")
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--waypoints", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--path", "path_file", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Overlay PNG to write")
def render(image: Path, waypoints: Optional[Path], path_file: Optional[Path], out: Path) -> None:
    with _reported_errors():
        run_render(image, waypoints, path_file, out)


def run_render(image: Path, waypoints: Optional[Path], path_file: Optional[Path], out: Path) -> Tuple[int, int]:
    run = RunConfig("render", None, {"image": image, "waypoints": waypoints, "path": path_file, "out": out}).validate()
    grid = read_grid(image)
    points = _read_waypoints(waypoints) if waypoints is not None else None
    path = _read_path(path_file) if path_file is not None else None
    if points is None and path is not None:
        points = WaypointSet(path.points, path.labels)
    overlay = render_overlay(grid, points, path)
    save_overlay(overlay, out, run.to_dict())
    _info("🖼️ Overlay written to ", out)
    return overlay.size


if __name__ == "__main__":
    sys.exit(cli())
