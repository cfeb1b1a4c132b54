# dataset commands under `diffprobe data`

from pathlib import Path
from typing import Optional

from loguru import logger
import typer

from diffprobe.config import ConfigError
from diffprobe.dataset_build import delete_dataset, export_class_directories, ingest
from diffprobe.pipeline import run_pipeline
from diffprobe.synthetic import SyntheticSpec, synthesize

data_app = typer.Typer(help="Dataset operations")


def _fail(e: Exception) -> None:
    code = 2 if isinstance(e, ConfigError) else 3
    kind = "Configuration error" if code == 2 else type(e).__name__
    typer.echo(f"✗ {kind}: {e}", err=True)
    raise typer.Exit(code)


@data_app.command()
def synth(
    ctx: typer.Context,
    out: Path = typer.Argument(..., help="Directory for the class-per-directory export"),
    n_per_class: Optional[int] = typer.Option(None, help="Images per class (default: config)"),
) -> None:
    """Render the synthetic fine-grained set and export it as class directories."""
    config = ctx.obj.config
    syn = config.dataset.synthetic
    try:
        spec = SyntheticSpec(
            k=syn.k,
            image_size=config.dataset.image_size,
            noise=syn.noise,
            max_rotation=syn.max_rotation,
            jitter=syn.jitter,
        )
        images = synthesize(spec, n_per_class or syn.n_per_class, config.seed)
        export_class_directories(images, out)
    except Exception as e:
        _fail(e)
    typer.echo(f"✓ {len(images)} synthetic images in {syn.k} classes written to {out}")


@data_app.command("ingest")
def ingest_command(
    ctx: typer.Context,
    directory: Path = typer.Argument(..., help="Directory-per-class image tree"),
    label_map: Optional[Path] = typer.Option(None, help="'<dir-name>,<class-id>' label map"),
    out: Optional[Path] = typer.Option(None, help="Export the ingested set here"),
) -> None:
    """Load and preprocess an image tree, reporting per-class counts."""
    config = ctx.obj.config
    try:
        images = ingest(directory, label_map, config.dataset.image_size)
        if out is not None:
            export_class_directories(images, out)
    except Exception as e:
        _fail(e)
    counts = images.labels.tolist()
    for class_id, name in sorted(images.label_map.items()):
        typer.echo(f"{class_id:>4}  {name}: {counts.count(class_id)}")
    typer.echo(f"✓ Ingested {len(images)} images")


@data_app.command()
def build(
    ctx: typer.Context,
    force: bool = typer.Option(False, "--force", help="Delete a previous dataset without asking"),
) -> None:
    """Build the run's train/val/test splits from the configured source."""
    cli_context = ctx.obj
    layout = cli_context.layout

    if layout.data.exists() and any(layout.data.iterdir()):
        if not force and not typer.confirm(
            f"Are you sure you want to delete the previous dataset at {layout.data}?"
        ):
            raise typer.Abort()
        logger.info(f"Deleting previous dataset {layout.data}")
        delete_dataset(layout)

    logger.info(f"Building dataset in {layout.data} (seed {cli_context.config.seed})")
    try:
        run_pipeline(cli_context.config, stop_after="data")
    except Exception as e:
        _fail(e)
    typer.echo(f"✓ Dataset written to {layout.data}")
