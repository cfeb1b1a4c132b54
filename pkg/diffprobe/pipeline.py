"""
Stage orchestration: data → train → extract → sweep → cluster, or
data → extract → probe-ood for the frozen-backbone transfer protocol.

Each stage is keyed by the config sections it reads plus the hashes of
its inputs. A stage whose record carries the same key and whose outputs
still hash to the recorded values is skipped.
"""

import json
import shutil
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from diffprobe.checkpoint import Checkpoint, load_checkpoint
from diffprobe.cluster import cluster_runs, pca_tokens, save_pca_overlay, write_cluster_report
from diffprobe.config import ExperimentConfig
from diffprobe.dataset_build import build_dataset, dataset_id, delete_dataset, load_split
from diffprobe.denoiser import ReadoutId, all_readouts
from diffprobe.diffusion import ddim_sample, ddpm_sample
from diffprobe.features import (
    FeatureCacheError,
    extract_grid,
    feature_maps,
    l2_normalize,
    read_grid,
    select_cell,
    write_grid,
)
from diffprobe.hashing import content_sha256, derived_generator, file_sha256
from diffprobe.image_io import write_dpim, write_pgm
from diffprobe.manifest import ArtifactEntry, RunManifest, StageEntry
from diffprobe.probe import probe_cell, sweep, write_metrics, write_sweep
from diffprobe.run_layout import RunLayout
from diffprobe.schedule import NoiseSchedule, build_schedule
from diffprobe.training import train_loop

__all__ = [
    "StageError",
    "STAGES",
    "OOD_STAGES",
    "stage_key",
    "schedule_for",
    "run_pipeline",
    "run_stage",
    "extract_stage",
    "resolve_readouts",
    "sample_checkpoint",
]

STAGES = ("data", "train", "extract", "sweep", "cluster")
OOD_STAGES = ("data", "extract", "probe_ood")

# config sections each stage reads
STAGE_SECTIONS = {
    "data": ("mode", "seed", "dataset"),
    "train": ("seed", "schedule", "weighting", "sampler", "model", "train"),
    "extract": ("seed", "sweep"),
    "sweep": ("seed", "probe"),
    "cluster": ("seed", "probe", "cluster"),
    "probe_ood": ("seed", "probe", "ood"),
}

SPLITS = ("train", "val", "test")

Output = Tuple[Path, str]


class StageError(Exception):
    """A pipeline stage failed; ``stage`` names it and ``manifest`` holds what completed."""

    def __init__(self, stage: str, message: str, manifest: Optional[RunManifest] = None):
        super().__init__(f"Stage '{stage}' failed: {message}")
        self.stage = stage
        self.manifest = manifest


@dataclass
class PipelineContext:
    config: ExperimentConfig
    layout: RunLayout
    manifest: RunManifest


def stage_key(config: ExperimentConfig, stage: str, inputs: Dict[str, str]) -> str:
    return content_sha256(
        {"stage": stage, "config": config.section_dump(*STAGE_SECTIONS[stage]), "inputs": inputs}
    )


def schedule_for(config: Dict) -> NoiseSchedule:
    """Schedule described by a config dump (a checkpoint's or a run's)."""
    s = config["schedule"]
    return build_schedule(s["kind"], int(s["T"]), float(s["offset_s"]))


def _cached_outputs(ctx: PipelineContext, stage: str, key: str) -> Optional[List[Dict]]:
    record_path = ctx.layout.stage_record(stage)
    if not record_path.exists():
        return None
    record = json.loads(record_path.read_text())
    if record.get("key") != key:
        logger.info(f"Stage {stage}: configuration or inputs changed, rerunning")
        return None
    for output in record["outputs"]:
        path = Path(output["path"])
        path = path if path.is_absolute() else ctx.layout.run_dir / path
        if not path.exists() or file_sha256(path) != output["sha256"]:
            logger.info(f"Stage {stage}: output {output['name']} is missing or modified, rerunning")
            return None
    return record["outputs"]


def run_stage(
    ctx: PipelineContext,
    stage: str,
    inputs: Dict[str, str],
    action: Callable[[], List[Output]],
) -> Dict[str, str]:
    """Run or skip one stage; returns artifact name → sha256 for its outputs."""
    key = stage_key(ctx.config, stage, inputs)
    start = time.perf_counter()

    cached = _cached_outputs(ctx, stage, key)
    if cached is not None:
        for output in cached:
            ctx.manifest.artifacts.append(ArtifactEntry(**output))
        ctx.manifest.record_stage(StageEntry(stage, key, "cached", time.perf_counter() - start))
        logger.info(f"Stage {stage}: cache hit ({key[:12]}), skipping")
        return {o["name"]: o["sha256"] for o in cached}

    logger.info(f"Stage {stage}: running")
    try:
        outputs = action()
        entries = [
            ctx.manifest.record_artifact(stage, _artifact_name(ctx, path), path, kind)
            for path, kind in outputs
        ]
    except Exception as e:
        ctx.manifest.record_stage(
            StageEntry(stage, key, "failed", time.perf_counter() - start, error=str(e))
        )
        ctx.manifest.save(ctx.layout.manifest)
        raise StageError(stage, str(e), ctx.manifest) from e

    record_path = ctx.layout.stage_record(stage)
    record_path.parent.mkdir(parents=True, exist_ok=True)
    record_path.write_text(
        json.dumps(
            {"stage": stage, "key": key, "outputs": [asdict(e) for e in entries]},
            indent=2,
            sort_keys=True,
        )
    )
    elapsed = time.perf_counter() - start
    ctx.manifest.record_stage(StageEntry(stage, key, "ran", elapsed))
    logger.info(f"Stage {stage}: done in {elapsed:.1f}s, {len(entries)} artifacts")
    return {e.name: e.sha256 for e in entries}


def _artifact_name(ctx: PipelineContext, path: Path) -> str:
    try:
        return str(Path(path).relative_to(ctx.layout.run_dir))
    except ValueError:
        return str(path)


def _data_stage(ctx: PipelineContext) -> List[Output]:
    layout = ctx.layout
    delete_dataset(layout)
    build_dataset(ctx.config.dataset, ctx.config.mode, ctx.config.seed, layout)
    outputs: List[Output] = [(layout.label_map, "dataset"), (layout.dataset_info, "dataset")]
    for split in SPLITS:
        outputs += [
            (layout.split_images(split), "dataset"),
            (layout.split_labels(split), "dataset"),
            (layout.split_records(split), "dataset"),
        ]
    return outputs


def _train_stage(ctx: PipelineContext) -> List[Output]:
    layout = ctx.layout
    shutil.rmtree(layout.train, ignore_errors=True)
    train_loop(ctx.config, load_split(layout, "train"), load_split(layout, "val"), layout)
    checkpoints = sorted(layout.checkpoints.glob("*.dprb"))
    return [(p, "checkpoint") for p in checkpoints] + [
        (layout.loss_csv, "curve"),
        (layout.training_summary, "summary"),
    ]


def resolve_readouts(checkpoint: Checkpoint, ells) -> List[ReadoutId]:
    readouts = all_readouts(checkpoint.denoiser_config)
    if ells == "all":
        return readouts
    available = {r.ell: r for r in readouts}
    missing = sorted(set(ells) - set(available))
    if missing:
        raise FeatureCacheError(f"Readouts {missing} do not exist in this denoiser")
    return [available[ell] for ell in ells]


def extract_stage(
    config: ExperimentConfig,
    layout: RunLayout,
    checkpoint_path: Path,
    splits: Sequence[str],
    timesteps: Sequence[int],
    ells: Optional[Sequence[int]] = None,
) -> List[Output]:
    """Extract feature grids for ``splits`` with the EMA weights of a checkpoint."""
    checkpoint = load_checkpoint(checkpoint_path)
    model = checkpoint.build_denoiser(use_ema=True)
    schedule = schedule_for(checkpoint.config)
    readouts = resolve_readouts(checkpoint, config.sweep.readouts if ells is None else ells)
    ds_id = dataset_id(layout)

    outputs: List[Output] = []
    for split in splits:
        directory = layout.feature_dir(split)
        shutil.rmtree(directory, ignore_errors=True)
        images = load_split(layout, split)
        if images.image_size != checkpoint.denoiser_config.image_size:
            raise FeatureCacheError(
                f"{split} images are {images.image_size}px but the checkpoint expects "
                f"{checkpoint.denoiser_config.image_size}px"
            )
        grid = extract_grid(
            model,
            schedule,
            images,
            timesteps,
            readouts,
            seed=config.seed,
            checkpoint_hash=checkpoint.sha256,
            dataset_id=ds_id,
            split=split,
            batch_size=config.sweep.batch_size,
            noise_policy=config.sweep.noise_policy,
        )
        write_grid(grid, directory)
        outputs += [(p, "features") for p in sorted(directory.iterdir())]

    if file_sha256(checkpoint_path) != checkpoint.sha256:
        raise FeatureCacheError(f"Checkpoint {checkpoint_path} changed during feature extraction")
    return outputs


def _sweep_stage(ctx: PipelineContext) -> List[Output]:
    layout, config = ctx.layout, ctx.config
    checkpoint_hash = file_sha256(layout.best_checkpoint)
    grids = {s: read_grid(layout.feature_dir(s), checkpoint_hash) for s in SPLITS}
    sets = {s: load_split(layout, s) for s in SPLITS}
    class_names = sets["train"].label_map
    result = sweep(
        grids["train"],
        grids["val"],
        grids["test"],
        {s: sets[s].labels for s in SPLITS},
        num_classes=sets["train"].num_classes,
        hyper=config.probe,
        denoiser_config=config.model,
        seed=config.seed,
        class_names=class_names,
    )
    write_sweep(result, layout.sweep_csv, layout.selection, class_names)
    return [
        (layout.sweep_csv, "table"),
        (layout.selection, "selection"),
        (layout.probe / "per_class.csv", "table"),
        (layout.probe / "confusion.csv", "table"),
    ]


def _read_selection(path: Path) -> Tuple[int, int]:
    selection = json.loads(path.read_text())
    return int(selection["t_star"]), int(selection["ell_star"])


def _cluster_stage(ctx: PipelineContext) -> List[Output]:
    layout, config = ctx.layout, ctx.config
    section = config.cluster
    t_star, ell_star = _read_selection(layout.selection)
    checkpoint = load_checkpoint(layout.best_checkpoint)
    grid = read_grid(layout.feature_dir("test"), checkpoint.sha256, [t_star], [ell_star])
    test = load_split(layout, "test")

    X = select_cell(grid, t_star, ell_star)
    if config.probe.normalize:
        X = l2_normalize(X)
    k = section.k or test.num_classes
    summary = cluster_runs(
        X,
        test.labels,
        k,
        runs=section.runs,
        restarts=section.restarts,
        max_iter=section.max_iter,
        tol=section.tol,
        seed=config.seed,
        silhouette_sample=section.silhouette_sample,
    )
    write_cluster_report(
        summary, layout.cluster_report, {"t_star": t_star, "ell_star": ell_star, "split": "test"}
    )
    outputs: List[Output] = [(layout.cluster_report, "report")]

    count = min(section.pca_images, len(test))
    if count > 0:
        batch = test.subset(range(count))
        maps = feature_maps(
            checkpoint.build_denoiser(use_ema=True),
            schedule_for(checkpoint.config),
            batch,
            t_star,
            grid.readout(ell_star),
            seed=config.seed,
            noise_policy=config.sweep.noise_policy,
        )
        tokens = pca_tokens(maps, section.pca_components, section.pca_mask_quantile)
        shutil.rmtree(layout.pca_overlays, ignore_errors=True)
        written = save_pca_overlay(tokens, layout.pca_overlays, batch.images)
        outputs += [(p, "overlay") for p in written]
    return outputs


def _ood_source(config: ExperimentConfig) -> Tuple[RunLayout, Tuple[int, int]]:
    source = RunLayout(Path(config.ood.source_run))
    if not source.best_checkpoint.exists() or not source.selection.exists():
        raise FeatureCacheError(
            f"Source run {source.run_dir} has no best checkpoint and selection; "
            "run the balanced pipeline there first"
        )
    return source, _read_selection(source.selection)


def _probe_ood_stage(ctx: PipelineContext, source: RunLayout, cell: Tuple[int, int]) -> List[Output]:
    layout, config = ctx.layout, ctx.config
    t_star, ell_star = cell
    checkpoint_hash = file_sha256(source.best_checkpoint)
    grids = {
        s: read_grid(layout.feature_dir(s), checkpoint_hash, [t_star], [ell_star])
        for s in ("train", "test")
    }
    sets = {s: load_split(layout, s) for s in ("train", "test")}
    class_names = sets["train"].label_map
    _, metrics = probe_cell(
        grids["train"],
        grids["test"],
        {s: sets[s].labels for s in sets},
        sets["train"].num_classes,
        config.probe,
        t_star,
        ell_star,
        seed=config.seed,
        class_names=class_names,
    )
    layout.probe.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, layout.probe, class_names)
    result = {
        "source_run": str(source.run_dir),
        "source_checkpoint_sha256": checkpoint_hash,
        "t_star": t_star,
        "ell_star": ell_star,
        "test_acc": metrics.accuracy,
        "test_macro_f1": metrics.macro_f1,
    }
    layout.ood_result.write_text(json.dumps(result, indent=2, sort_keys=True))
    logger.info(
        f"OOD probe at t*={t_star} ℓ*={ell_star}: test accuracy {metrics.accuracy:.4f}, "
        f"Macro F1 {metrics.macro_f1:.4f}"
    )
    return [
        (layout.ood_result, "selection"),
        (layout.probe / "per_class.csv", "table"),
        (layout.probe / "confusion.csv", "table"),
    ]


def _open_manifest(config: ExperimentConfig, layout: RunLayout) -> RunManifest:
    snapshot = config.snapshot()
    if layout.manifest.exists():
        previous = RunManifest.load(layout.manifest)
        if previous.config_snapshot == snapshot:
            return previous
        logger.info(f"Configuration changed since the last run in {layout.run_dir}; starting a new manifest")
    return RunManifest(run_dir=str(layout.run_dir), config_snapshot=snapshot)


def run_pipeline(config: ExperimentConfig, stop_after: Optional[str] = None) -> RunManifest:
    """
    Run every stage of the configured mode in order, skipping hash-matched
    stages. ``stop_after`` ends the run after the named stage.

    Raises:
        StageError: naming the failed stage; its manifest is saved first
    """
    layout = RunLayout(Path(config.output_dir))
    layout.run_dir.mkdir(parents=True, exist_ok=True)
    layout.config_snapshot.write_text(config.snapshot())
    ctx = PipelineContext(config=config, layout=layout, manifest=_open_manifest(config, layout))

    def done(stage: str) -> bool:
        if stage == stop_after:
            ctx.manifest.save(layout.manifest)
            return True
        return False

    data = run_stage(ctx, "data", {}, lambda: _data_stage(ctx))
    if done("data"):
        return ctx.manifest
    images = {name: sha for name, sha in data.items() if name.endswith(".dpim")}

    if config.mode == "ood":
        source, cell = _ood_source(config)
        source_hash = file_sha256(source.best_checkpoint)
        features = run_stage(
            ctx,
            "extract",
            {"checkpoint": source_hash, "cell": list(cell), **images},
            lambda: extract_stage(
                config, layout, source.best_checkpoint, ("train", "test"), [cell[0]], [cell[1]]
            ),
        )
        if done("extract"):
            return ctx.manifest
        run_stage(ctx, "probe_ood", features, lambda: _probe_ood_stage(ctx, source, cell))
        if file_sha256(source.best_checkpoint) != source_hash:
            raise StageError("probe_ood", "source checkpoint changed", ctx.manifest)
        ctx.manifest.save(layout.manifest)
        return ctx.manifest

    trained = run_stage(ctx, "train", images, lambda: _train_stage(ctx))
    if done("train"):
        return ctx.manifest
    best = trained[_artifact_name(ctx, layout.best_checkpoint)]

    features = run_stage(
        ctx,
        "extract",
        {"checkpoint": best, **images},
        lambda: extract_stage(
            config, layout, layout.best_checkpoint, SPLITS, list(config.sweep.timesteps)
        ),
    )
    if done("extract"):
        return ctx.manifest

    swept = run_stage(ctx, "sweep", features, lambda: _sweep_stage(ctx))
    if done("sweep"):
        return ctx.manifest

    selection = swept[_artifact_name(ctx, layout.selection)]
    test_features = {n: h for n, h in features.items() if n.startswith("features/test/")}
    run_stage(ctx, "cluster", {"selection": selection, **test_features}, lambda: _cluster_stage(ctx))
    ctx.manifest.save(layout.manifest)
    return ctx.manifest


def sample_checkpoint(
    checkpoint_path: Path,
    out_dir: Path,
    n: int,
    seed: int,
    sampler: str = "ddim",
    steps: int = 50,
    eta: float = 0.0,
    use_ema: bool = True,
) -> Path:
    """Draw ``n`` images from a checkpoint; writes ``samples.dpim`` plus one PGM per image."""
    checkpoint = load_checkpoint(checkpoint_path)
    model = checkpoint.build_denoiser(use_ema=use_ema)
    schedule = schedule_for(checkpoint.config)
    generator = derived_generator(seed, "sample", sampler)
    if sampler == "ddpm":
        images = ddpm_sample(model, schedule, n, generator)
    else:
        images = ddim_sample(model, schedule, n, steps=steps, eta=eta, generator=generator)
    images = images.to(torch.float32).numpy()

    out_dir.mkdir(parents=True, exist_ok=True)
    write_dpim(out_dir / "samples.dpim", images)
    for i, image in enumerate(images):
        write_pgm(out_dir / f"sample_{i:03d}.pgm", image[0].astype(np.float64))
    logger.info(f"Wrote {n} {sampler} samples to {out_dir}")
    return out_dir
