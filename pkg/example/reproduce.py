"""Scaled-down reproduction: generate a dataset, train several runs, score the network against both baselines.

    python example/reproduce.py --scenario curved --out results/curved
"""
import logging
from pathlib import Path
from typing import Dict, List

import click

from cropway.__main__ import run_eval, run_generate, run_train
from cropway.config import write_json
from cropway.evaluation import EvalReport

logger = logging.getLogger("cropway.reproduce")

SCENARIOS = ("straight", "curved", "mixed")


@click.command(help="Run the scaled reproduction of the waypoint and clustering scores")
@click.option("--scenario", default="straight", show_default=True, type=click.Choice(SCENARIOS))
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path), help="Working directory")
@click.option("--count", default="400,0,100", show_default=True, help="Images per split, as train,val,test")
@click.option("--size", default=416, show_default=True, help="Square image side in pixels")
@click.option("--epochs", default=60, show_default=True)
@click.option("--runs", default=3, show_default=True, help="Independently seeded trainings")
@click.option("--seed", default=0, show_default=True)
def reproduce(scenario: str, out: Path, count: str, size: int, epochs: int, runs: int, seed: int) -> None:
    logging.basicConfig(level="INFO", format="%(levelname)s %(name)s: %(message)s")
    data = out / "data"
    run_generate(
        data,
        count=count,
        seed=seed,
        height=size,
        width=size,
        curved=scenario == "curved",
        mixed=scenario == "mixed",
    )

    checkpoints: List[Path] = []
    for run in range(runs):
        checkpoints.append(run_train(data, out / f"run{run}.bin", epochs=epochs, seed=seed + run))

    reports: Dict[str, EvalReport] = {}
    for predictor in ("model", "kmeans", "dbscan"):
        logger.info("Scoring %s on the %s test split", predictor, scenario)
        reports[predictor] = run_eval(data, baseline=predictor, checkpoints=checkpoints, out=out / f"{predictor}.json")
    # baselines on exact positions isolate the clustering step
    for predictor in ("kmeans", "dbscan"):
        exact = out / f"{predictor}.exact.json"
        reports[f"{predictor} (exact positions)"] = run_eval(data, baseline=predictor, out=exact)

    for name, report in reports.items():
        report.predictor = name
        click.echo(report.to_table())
        click.echo()
    write_json({name: report.to_dict() for name, report in reports.items()}, out / "summary.json")


if __name__ == "__main__":
    reproduce()
