import dataclasses
import json
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np
import typer
from rich.console import Console
from rich.table import Table

from . import config, toy
from .binning import BinPartition
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .density import dilution_log_factor, hemisphere_demo
from .errors import AqmmError, InvalidInputError
from .evaluation import (
    Workload,
    average_ll,
    export_viz,
    prediction_error,
    summarize_samples,
    throughput_bench,
    viz_points,
)
from .grid import (
    GridDistribution,
    RotationGrid,
    cells_for_ll,
    grid_validation_nll,
    theoretical_max_ll,
    train_grid_model,
    validation_negatives,
)
from .sampler import MogQuaternionModel, QuaternionModel
from .scorer import evaluate_nll, train

# アプリケーション定義
app = typer.Typer(help="Exact rotation densities on SO(3) from autoregressive quaternion mixtures")
oracle_app = typer.Typer(help="Closed-form reference values (no model needed)")

app.add_typer(oracle_app, name="oracle")

# stdout は JSON 専用、人間向けの表示は stderr
console = Console(stderr=True)

_state = {"threads": None}


@app.callback()
def main_callback(
    threads: Optional[int] = typer.Option(None, "--threads", min=1, help="Cap the worker pool for grid evaluation."),
):
    _state["threads"] = threads


# --- Helpers ---

def _emit(data: dict):
    typer.echo(json.dumps(data, indent=2))


@contextmanager
def _handle_errors():
    """AqmmError / OSError を赤字の診断と JSON エラーオブジェクトに変換して終了コード 1 で終えます。"""
    try:
        yield
    except (AqmmError, OSError) as e:
        console.print(f"[red]Error:[/red] {e}")
        _emit({"error": {"type": type(e).__name__, "message": str(e)}})
        raise typer.Exit(1)


def _load_modes(path: Path) -> toy.ToyModeSet:
    if not path.exists():
        raise InvalidInputError(f"Mode-set file not found: {path}. Run 'aqmm toy-gen' first.")
    return toy.load_mode_set(path)


def _build_model(ck: Checkpoint):
    if ck.kind == "aquamam":
        return QuaternionModel(ck.params)
    if ck.kind == "aquamam-mog":
        return MogQuaternionModel(ck.params)
    grid = RotationGrid.generate(ck.config.model.grid_size, ck.config.model.grid_seed)
    return GridDistribution(ck.params, grid, _state["threads"])


def _validation_nll(ck: Checkpoint, mode_set: toy.ToyModeSet) -> float:
    training = ck.config.training
    viewpoints, qs = toy.validation_samples(mode_set, training.seed, training.val_size)
    if ck.kind == "grid":
        negatives = validation_negatives(ck.params.config, training.seed)
        return grid_validation_nll(ck.params, viewpoints, qs, negatives)
    return evaluate_nll(ck.params, viewpoints, qs)


def _log_path(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.name + ".log.json")


# --- Main Commands ---

@app.command("toy-gen")
def toy_gen(
    seed: int = typer.Option(0, "--seed", help="Seed for the mode set."),
    out: Path = typer.Option(Path("modes.jsonl"), "--out", help="Mode-set file to write."),
    n_samples: int = typer.Option(0, "--n-samples", min=0, help="Also write this many stream samples."),
    samples_out: Optional[Path] = typer.Option(None, "--samples-out", help="Sample file (default: <out>.samples.jsonl)."),
):
    """
    Generate the six-viewpoint toy mode set (and optionally a sample file).
    """
    with _handle_errors():
        mode_set = toy.generate_mode_set(seed)
        toy.save_mode_set(mode_set, out)
        console.print(f"[green]Wrote {mode_set.total_modes} modes[/green] to {out} [dim](seed {seed})[/dim]")
        samples_path = None
        if n_samples:
            samples_path = samples_out or out.with_name(out.stem + ".samples.jsonl")
            viewpoints, qs = toy.draw_samples(mode_set, np.random.default_rng([seed, 5]), n_samples)
            toy.write_samples(samples_path, mode_set, viewpoints, qs)
            console.print(f"[green]Wrote {n_samples} samples[/green] to {samples_path}")
        _emit({
            "modes": str(out),
            "seed": seed,
            "total_modes": mode_set.total_modes,
            "samples": str(samples_path) if samples_path else None,
        })


@app.command("train")
def train_cmd(
    config_path: Optional[Path] = typer.Option(None, "--config", help="TOML run config (default: app dir config.toml)."),
    out: Optional[Path] = typer.Option(None, "--out", help="Checkpoint path (default: paths.out)."),
    modes: Optional[Path] = typer.Option(None, "--modes", help="Mode-set file (default: paths.modes)."),
    kind: Optional[str] = typer.Option(None, "--kind", help="Override model.kind: aquamam | aquamam-mog | grid."),
):
    """
    Train a model on the toy stream and write a checkpoint plus training log.
    """
    with _handle_errors():
        run = config.load_run_config(config_path)
        if kind is not None:
            run = dataclasses.replace(run, model=dataclasses.replace(run.model, kind=kind))
        modes_path = modes or Path(run.paths.modes)
        if modes_path.exists():
            mode_set = toy.load_mode_set(modes_path)
        else:
            console.print(f"[yellow]{modes_path} not found; generating modes from dataset.seed={run.dataset.seed}[/yellow]")
            mode_set = toy.generate_mode_set(run.dataset.seed)

        if run.model.kind == "grid":
            result = train_grid_model(mode_set, run.model.grid_config(), run.training, console)
        else:
            result = train(mode_set, run.model.scorer_config(), run.training, console)

        ckpt = out or Path(run.paths.out)
        save_checkpoint(ckpt, run.model.kind, run, result.params)
        log_path = _log_path(ckpt)
        log_path.write_text(json.dumps(result.log_dict(), indent=2), encoding="utf-8")
        console.print(f"[green]Saved checkpoint[/green] {ckpt} [dim](log: {log_path})[/dim]")
        _emit({
            "checkpoint": str(ckpt),
            "log": str(log_path),
            "kind": run.model.kind,
            "config_digest": run.digest(),
            "best_val_nll": result.best_val_nll,
            "best_epoch": result.best_epoch,
            "epochs": len(result.log),
            "stop_reason": result.stop_reason,
        })


@app.command("eval")
def eval_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="AQMM checkpoint."),
    modes: Path = typer.Option(Path("modes.jsonl"), "--modes", help="Mode-set file."),
):
    """
    Average LL on the replicated evaluation set, classification NLL and oracle gap.
    """
    with _handle_errors():
        ck = load_checkpoint(checkpoint)
        mode_set = _load_modes(modes)
        model = _build_model(ck)
        partition = BinPartition(ck.config.model.n_bins)
        eval_set = toy.evaluation_set(mode_set)
        report = average_ll(model, eval_set)
        oracle = toy.theoretical_optimal_ll(mode_set, partition)

        result = {
            "kind": ck.kind,
            **report.to_dict(),
            "validation_nll": _validation_nll(ck, mode_set),
            "oracle_ll": oracle,
            "oracle_gap": oracle - report.average_ll if np.isfinite(report.average_ll) else None,
            "optimal_classification_nll": toy.optimal_classification_nll(mode_set, partition),
        }
        if ck.kind == "aquamam":
            values = model.log_densities(eval_set.viewpoints, eval_set.qs)
            result["classification_nll"] = -eval_set.weighted_mean(values - dilution_log_factor(eval_set.qs, partition))
        if ck.kind == "grid":
            result["max_ll"] = model.max_ll

        table = Table(title=f"Evaluation: {checkpoint.name}")
        table.add_column("Viewpoint", style="cyan")
        table.add_column("Modes", justify="right")
        table.add_column("Mean LL", justify="right")
        for v, ll in enumerate(report.per_viewpoint):
            table.add_row(str(v), str(2**v), f"{ll:.4f}")
        console.print(table)
        if report.non_finite:
            console.print(f"[red]{len(report.non_finite)} entries have zero density.[/red]")
        _emit(result)


@app.command("sample")
def sample_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="AQMM checkpoint."),
    modes: Path = typer.Option(Path("modes.jsonl"), "--modes", help="Mode-set file."),
    n: int = typer.Option(40_000, "--n", min=1, help="Number of hierarchical samples."),
    seed: int = typer.Option(0, "--seed", help="Sampling seed."),
    out: Optional[Path] = typer.Option(None, "--out", help="Write samples as JSON lines."),
):
    """
    Draw hierarchical samples and report sampling fidelity.
    """
    with _handle_errors():
        ck = load_checkpoint(checkpoint)
        mode_set = _load_modes(modes)
        model = _build_model(ck)
        rng = np.random.default_rng(seed)
        viewpoints = rng.integers(0, mode_set.n_viewpoints, size=n)
        qs = model.sample_many(viewpoints, rng)
        if out is not None:
            toy.write_samples(out, mode_set, viewpoints, qs)
            console.print(f"[green]Wrote {n} samples[/green] to {out}")
        report = summarize_samples(mode_set, viewpoints, qs, BinPartition(ck.config.model.n_bins))

        table = Table(title="Sampling fidelity")
        table.add_column("Viewpoint", style="cyan")
        table.add_column("TVD", justify="right")
        for v, tvd in enumerate(report.tvd):
            table.add_row(str(v), f"{tvd:.4f}")
        console.print(table)
        console.print(
            f"mean distance {report.mean_distance_deg:.3f} deg, "
            f"invalid {report.invalid_count} ({100 * report.invalid_rate:.2f}%)"
        )
        _emit({"kind": ck.kind, "samples": str(out) if out else None, **report.to_dict()})


@app.command("predict")
def predict_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="AQMM checkpoint."),
    modes: Path = typer.Option(Path("modes.jsonl"), "--modes", help="Mode-set file."),
):
    """
    Greedy per-viewpoint predictions and their error to the nearest true mode.
    """
    with _handle_errors():
        ck = load_checkpoint(checkpoint)
        mode_set = _load_modes(modes)
        model = _build_model(ck)
        if not hasattr(model, "predict_many"):
            raise InvalidInputError(f"Prediction is not supported for {ck.kind!r} checkpoints.")
        report = prediction_error(model, mode_set)

        table = Table(title="Predictions")
        table.add_column("Viewpoint", style="cyan")
        table.add_column("q (x, y, z, w)")
        table.add_column("Error (deg)", justify="right")
        for v, (q, err) in enumerate(zip(report.predictions, report.per_viewpoint_deg)):
            table.add_row(str(v), ", ".join(f"{c:+.4f}" for c in q), f"{err:.3f}")
        console.print(table)
        _emit({"kind": ck.kind, **report.to_dict()})


@app.command("bench")
def bench_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="AQMM checkpoint."),
    baseline_checkpoint: Optional[Path] = typer.Option(None, "--baseline-checkpoint", help="Grid baseline checkpoint."),
    grid_sizes: Optional[str] = typer.Option(None, "--grid-sizes", help="Comma-separated grid sizes (default: M,2M)."),
    modes: Path = typer.Option(Path("modes.jsonl"), "--modes", help="Mode-set file."),
    n_eval: int = typer.Option(64, "--n-eval", min=1),
    n_sample: int = typer.Option(1024, "--n-sample", min=1),
    n_predict: int = typer.Option(256, "--n-predict", min=1),
    seed: int = typer.Option(0, "--seed"),
):
    """
    Measure eval/sample/predict throughput; time the grid baseline at two grid sizes.
    """
    with _handle_errors():
        ck = load_checkpoint(checkpoint)
        mode_set = _load_modes(modes)
        model = _build_model(ck)
        baselines = []
        if baseline_checkpoint is not None:
            base = load_checkpoint(baseline_checkpoint)
            if base.kind != "grid":
                raise InvalidInputError(f"{baseline_checkpoint} is a {base.kind!r} checkpoint, not a grid baseline.")
            if grid_sizes:
                try:
                    sizes = [int(s) for s in grid_sizes.split(",") if s.strip()]
                except ValueError as e:
                    raise InvalidInputError(f"--grid-sizes must be integers: {grid_sizes!r}") from e
            else:
                sizes = [base.config.model.grid_size, 2 * base.config.model.grid_size]
            baselines = [
                GridDistribution(base.params, RotationGrid.generate(m, base.config.model.grid_seed), _state["threads"])
                for m in sizes
            ]
        record = throughput_bench(
            model, mode_set, Workload(n_eval, n_sample, n_predict, seed), console, ck.config.digest(), baselines
        )
        _emit(record.to_dict())


@app.command("export-viz")
def export_viz_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="AQMM checkpoint."),
    modes: Path = typer.Option(Path("modes.jsonl"), "--modes", help="Mode-set file."),
    viewpoint: int = typer.Option(..., "--viewpoint", min=0, help="Viewpoint id."),
    n: int = typer.Option(1000, "--n", min=2, help="Total number of rotations."),
    seed: int = typer.Option(0, "--seed"),
    out: Path = typer.Option(Path("viz.csv"), "--out", help="CSV output."),
):
    """
    Export ground truth, model samples and uniform rotations as rotation vectors with log densities.
    """
    with _handle_errors():
        ck = load_checkpoint(checkpoint)
        mode_set = _load_modes(modes)
        if viewpoint >= mode_set.n_viewpoints:
            raise InvalidInputError(f"Unknown viewpoint id {viewpoint}.")
        points = viz_points(_build_model(ck), mode_set, viewpoint, n, np.random.default_rng(seed))
        export_viz(out, points)
        console.print(f"[green]Wrote {len(points)} rows[/green] to {out}")
        _emit({"out": str(out), "rows": len(points), "viewpoint": viewpoint})


# --- Oracle Commands ---

@oracle_app.command("max-ll")
def oracle_max_ll(cells: int = typer.Option(..., "--cells", help="Grid size M.")):
    """Maximum LL of a grid model with M cells, ln(M/pi^2)."""
    with _handle_errors():
        _emit({"cells": cells, "max_ll": theoretical_max_ll(cells)})


@oracle_app.command("cells")
def oracle_cells(ll: float = typer.Option(..., "--ll", help="Target log-likelihood.")):
    """Grid size needed to reach a given LL, pi^2 e^LL."""
    with _handle_errors():
        _emit({"ll": ll, "cells": cells_for_ll(ll)})


@oracle_app.command("toy")
def oracle_toy(
    modes: Path = typer.Option(Path("modes.jsonl"), "--modes", help="Mode-set file."),
    bins: int = typer.Option(4096, "--bins", min=2, help="Bin count N."),
):
    """Optimal average LL and classification NLL for a mode set."""
    with _handle_errors():
        mode_set = _load_modes(modes)
        partition = BinPartition(bins)
        _emit({
            "bins": bins,
            "optimal_ll": toy.theoretical_optimal_ll(mode_set, partition),
            "optimal_classification_nll": toy.optimal_classification_nll(mode_set, partition),
        })


@oracle_app.command("hemisphere")
def oracle_hemisphere(
    seed: int = typer.Option(0, "--seed"),
    points: int = typer.Option(1000, "--points", min=1),
):
    """Approximate the uniform hemisphere with a mixture of uniforms on the disk."""
    with _handle_errors():
        demo = hemisphere_demo(np.random.default_rng(seed), n_points=points)
        _emit({"points": len(demo.points), "mean_density": demo.mean_density, "true_density": demo.true_density})


def cli():
    app()


if __name__ == "__main__":
    cli()
