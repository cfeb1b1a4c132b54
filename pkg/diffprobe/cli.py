"""CLI module for diffprobe."""

import functools
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import typer
from dotenv import load_dotenv
from loguru import logger

from diffprobe.checkpoint import load_checkpoint
from diffprobe.cluster import cluster_runs, write_cluster_report
from diffprobe.config import ConfigError, ExperimentConfig, OODSection, load_experiment_config
from diffprobe.dataset_cli import data_app
from diffprobe.dataset_build import dataset_id, load_split
from diffprobe.denoiser import expected_parameter_count, parameter_count, readout_table
from diffprobe.features import extract_grid, l2_normalize, read_grid, select_cell, write_grid
from diffprobe.manifest import RunManifest
from diffprobe.pipeline import resolve_readouts, run_pipeline, sample_checkpoint, schedule_for
from diffprobe.report import join_ablation, report as write_report
from diffprobe.run_layout import RunLayout
from diffprobe.schedule import build_sampler, build_schedule, dump_schedule
from diffprobe.training import build_denoiser

app = typer.Typer()
app.add_typer(data_app, name="data")


@dataclass
class CLIContext:
    config: ExperimentConfig
    layout: RunLayout


def handle_errors(command):
    """Map ConfigError to exit code 2 and every other failure to exit code 3."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except typer.Exit:
            raise
        except ConfigError as e:
            typer.echo(f"✗ Configuration error: {e}", err=True)
            raise typer.Exit(2)
        except Exception as e:
            typer.echo(f"✗ {type(e).__name__}: {e}", err=True)
            raise typer.Exit(3)

    return wrapper


def add_log_file(layout: RunLayout) -> None:
    layout.logs.mkdir(parents=True, exist_ok=True)
    logger.add(layout.log_file, level="DEBUG", enqueue=False)


@app.callback()
def main(
    ctx: typer.Context,
    config_path: Path = typer.Option("config.yaml", help="Path to config file"),
    secrets_path: Path = typer.Option("secrets.yaml", help="Path to secrets file"),
    run_dir: Optional[Path] = typer.Option(None, help="Run directory (overrides config)"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log per-batch detail"),
) -> None:
    """Main entry point for the CLI."""
    load_dotenv()
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO")
    try:
        config = load_experiment_config(config_path, secrets_path)
        if run_dir:
            config = config.model_copy(update={"output_dir": str(run_dir)})
    except ConfigError as e:
        typer.echo(f"✗ Configuration error: {e}", err=True)
        raise typer.Exit(2)

    ctx.obj = CLIContext(config=config, layout=RunLayout(Path(config.output_dir)))


@app.command()
@handle_errors
def run(ctx: typer.Context) -> None:
    """Run every pipeline stage and write the report."""
    cli_context = ctx.obj
    add_log_file(cli_context.layout)
    manifest = run_pipeline(cli_context.config)
    result = write_report(manifest)
    typer.echo(result.summary)
    typer.echo(f"✓ Run complete: {cli_context.layout.run_dir}")


@app.command()
@handle_errors
def train(ctx: typer.Context) -> None:
    """Build the dataset if needed and train the denoiser."""
    cli_context = ctx.obj
    add_log_file(cli_context.layout)
    run_pipeline(cli_context.config, stop_after="train")
    typer.echo(f"✓ Best checkpoint: {cli_context.layout.best_checkpoint}")


@app.command()
@handle_errors
def sample(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, help="Checkpoint (default: run's best)"),
    n: int = typer.Option(16, help="Number of images"),
    sampler: str = typer.Option("ddim", help="ddim or ddpm"),
    steps: int = typer.Option(50, help="DDIM steps"),
    eta: float = typer.Option(0.0, help="DDIM stochasticity"),
    live: bool = typer.Option(False, help="Use live instead of EMA weights"),
    out: Optional[Path] = typer.Option(None, help="Output directory"),
) -> None:
    """Draw images from a trained denoiser."""
    cli_context = ctx.obj
    layout = cli_context.layout
    if sampler not in ("ddim", "ddpm"):
        raise ConfigError(f"Unknown sampler {sampler!r}; use ddim or ddpm")
    out_dir = sample_checkpoint(
        checkpoint or layout.best_checkpoint,
        out or layout.samples,
        n,
        cli_context.config.seed,
        sampler=sampler,
        steps=steps,
        eta=eta,
        use_ema=not live,
    )
    typer.echo(f"✓ {n} samples written to {out_dir}")


def _int_list(value: Optional[str]):
    if value is None:
        return None
    if value == "all":
        return "all"
    return [int(v) for v in value.split(",") if v.strip()]


@app.command()
@handle_errors
def extract(
    ctx: typer.Context,
    split: str = typer.Option("test", help="Dataset split"),
    checkpoint: Optional[Path] = typer.Option(None, help="Checkpoint (default: run's best)"),
    timesteps: Optional[str] = typer.Option(None, help="Comma-separated timesteps"),
    readouts: str = typer.Option("all", help="'all' or comma-separated readout indices"),
    out: Optional[Path] = typer.Option(None, help="Feature cache directory"),
) -> None:
    """Extract frozen features for one split over a (timestep, readout) grid."""
    cli_context = ctx.obj
    config, layout = cli_context.config, cli_context.layout
    ckpt = load_checkpoint(checkpoint or layout.best_checkpoint)
    grid = extract_grid(
        ckpt.build_denoiser(use_ema=True),
        schedule_for(ckpt.config),
        load_split(layout, split),
        _int_list(timesteps) or list(config.sweep.timesteps),
        resolve_readouts(ckpt, _int_list(readouts)),
        seed=config.seed,
        checkpoint_hash=ckpt.sha256,
        dataset_id=dataset_id(layout),
        split=split,
        batch_size=config.sweep.batch_size,
        noise_policy=config.sweep.noise_policy,
    )
    directory = write_grid(grid, out or layout.feature_dir(split))
    typer.echo(f"✓ {len(grid.cells)} feature cells written to {directory}")


@app.command()
@handle_errors
def sweep(ctx: typer.Context) -> None:
    """Fit a probe per (timestep, readout) cell and select the best on validation."""
    cli_context = ctx.obj
    add_log_file(cli_context.layout)
    run_pipeline(cli_context.config, stop_after="sweep")
    selection = json.loads(cli_context.layout.selection.read_text())
    typer.echo(json.dumps(selection, indent=2, sort_keys=True))


@app.command("probe-ood")
@handle_errors
def probe_ood(
    ctx: typer.Context,
    source_run: Optional[Path] = typer.Option(None, help="Run directory of the source backbone"),
) -> None:
    """Probe a target dataset with a frozen source backbone at its selected cell."""
    cli_context = ctx.obj
    config = cli_context.config
    source = str(source_run) if source_run else config.ood.source_run
    if not source:
        raise ConfigError("probe-ood needs --source-run or ood.source_run")
    config = config.model_copy(update={"mode": "ood", "ood": OODSection(source_run=source)})
    add_log_file(cli_context.layout)
    manifest = run_pipeline(config)
    typer.echo(write_report(manifest).summary)


@app.command()
@handle_errors
def cluster(
    ctx: typer.Context,
    features: Optional[Path] = typer.Option(None, help="Feature cache directory"),
    labels: Optional[Path] = typer.Option(None, help="Label file of '<index>,<class-id>' lines"),
    k: Optional[int] = typer.Option(None, help="Number of clusters (default: class count)"),
    seed: Optional[int] = typer.Option(None, help="Seed (default: config seed)"),
    t: Optional[int] = typer.Option(None, help="Timestep (default: selected t*)"),
    ell: Optional[int] = typer.Option(None, help="Readout (default: selected ℓ*)"),
    report: Optional[Path] = typer.Option(None, help="Report JSON path"),
) -> None:
    """Run the k-means diagnostic on one cached feature cell."""
    cli_context = ctx.obj
    config, layout = cli_context.config, cli_context.layout
    if t is None or ell is None:
        selection = json.loads(layout.selection.read_text())
        t = selection["t_star"] if t is None else t
        ell = selection["ell_star"] if ell is None else ell
    grid = read_grid(features or layout.feature_dir("test"), timesteps=[t], ells=[ell])
    label_path = labels or layout.split_labels("test")
    y = np.array(
        [int(line.split(",")[1]) for line in label_path.read_text().splitlines() if line.strip()]
    )
    X = select_cell(grid, t, ell)
    if config.probe.normalize:
        X = l2_normalize(X)
    section = config.cluster
    summary = cluster_runs(
        X,
        y,
        k or section.k or int(y.max()) + 1,
        runs=section.runs,
        restarts=section.restarts,
        max_iter=section.max_iter,
        tol=section.tol,
        seed=config.seed if seed is None else seed,
        silhouette_sample=section.silhouette_sample,
    )
    path = write_cluster_report(summary, report or layout.cluster_report, {"t_star": t, "ell_star": ell})
    typer.echo(f"✓ NMI {summary.mean['nmi']:.4f}, ARI {summary.mean['ari']:.4f}; report at {path}")


@app.command()
@handle_errors
def report(
    ctx: typer.Context,
    against: Optional[Path] = typer.Option(None, help="Second run to join as a loss ablation"),
) -> None:
    """Summarize a finished run and write plot-data CSVs."""
    layout = ctx.obj.layout
    manifest = replace(RunManifest.load(layout.manifest), run_dir=str(layout.run_dir))
    result = write_report(manifest)
    typer.echo(result.summary)
    if against:
        join_ablation(layout.run_dir, against, layout.report)
        typer.echo(f"✓ Ablation tables written to {layout.report}")


@app.command()
@handle_errors
def describe(ctx: typer.Context) -> None:
    """Print the denoiser size and its readout table."""
    config = ctx.obj.config
    model = build_denoiser(config)
    typer.echo(f"Parameters: {parameter_count(model):,} (analytic {expected_parameter_count(config.model):,})")
    typer.echo(f"Schedule: {config.schedule.kind}, T={config.schedule.T}")
    typer.echo("ell  r  b  channels  resolution  attention")
    for info in readout_table(config.model):
        typer.echo(
            f"{info.ell:>3}  {info.readout.stage}  {info.readout.block}  {info.channels:>8}  "
            f"{info.resolution:>10}  {'yes' if info.attention else 'no'}"
        )


@app.command("schedule-dump")
@handle_errors
def schedule_dump(
    ctx: typer.Context,
    out: Path = typer.Option(Path("schedule.csv"), help="Output CSV"),
) -> None:
    """Write β, α, ᾱ, SNR, the loss weights and p(t) for every timestep."""
    config = ctx.obj.config
    schedule = build_schedule(config.schedule.kind, config.schedule.T, config.schedule.offset_s)
    sampler = build_sampler(config.sampler.kind, schedule, config.sampler.variant)
    dump_schedule(schedule, sampler, out, config.weighting.gamma)
    typer.echo(f"✓ Schedule written to {out}")


if __name__ == "__main__":
    app()
