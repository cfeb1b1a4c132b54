"""Human-readable run summary and the plot-data CSVs behind it."""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import polvo as pv
import yaml
from loguru import logger

from diffprobe.config import REFERENCE_PROBE_BATCH_SIZE, REFERENCE_PROBE_EPOCHS
from diffprobe.diffusion import SNR_BINS, snr_bin_edges
from diffprobe.manifest import RunManifest
from diffprobe.pipeline import schedule_for
from diffprobe.probe import accuracy_vs_log_snr
from diffprobe.run_layout import RunLayout
from diffprobe.schedule import NoiseSchedule

__all__ = [
    "ReportError",
    "RunReport",
    "report",
    "grid_table",
    "loss_curves",
    "snr_loss_curve",
    "probe_protocol",
    "join_ablation",
]


class ReportError(Exception):
    """Raised when artifacts a report needs are missing."""

    pass


@dataclass(frozen=True)
class RunReport:
    summary: str
    files: Dict[str, Path]


def _require(paths: Dict[str, Path]) -> None:
    missing = [name for name, path in paths.items() if not path.exists()]
    if missing:
        raise ReportError(f"Missing artifacts: {', '.join(missing)}")


def _run_config(manifest: RunManifest) -> Dict:
    return yaml.safe_load(manifest.config_snapshot)


def grid_table(sweep: pd.DataFrame, split: str) -> pd.DataFrame:
    """Readouts as rows, timesteps as columns, accuracy and Macro F1 per cell."""
    at_split = sweep[sweep["split"] == split]
    table = at_split.pivot_table(
        index=["resolution", "block", "ell"], columns="t", values=["accuracy", "macro_f1"]
    )
    table.columns = [f"{'acc' if m == 'accuracy' else 'f1'}_t{t}" for m, t in table.columns]
    return table.reset_index().sort_values("ell", ignore_index=True)


def loss_curves(losses: pd.DataFrame, best_epoch: Optional[int]) -> pd.DataFrame:
    """Per-epoch train/val losses and the Fréchet diagnostic, with the selected epoch flagged."""
    wide = losses.pivot_table(index="epoch", columns="split", values="loss").reset_index()
    wide.columns.name = None
    wide = wide.rename(columns={s: f"{s}_loss" for s in ("train", "val", "val_ema")})
    frechet = losses.groupby("epoch")["frechet"].max().reset_index()
    wide = wide.merge(frechet, on="epoch", how="left")
    wide["best"] = wide["epoch"] == best_epoch
    return wide


def snr_loss_curve(
    losses: pd.DataFrame, schedule: NoiseSchedule, epoch: Optional[int], split: str = "val_ema"
) -> pd.DataFrame:
    """Validation loss per log-SNR bin at one epoch (the last when ``epoch`` is None)."""
    rows = losses[losses["split"] == split]
    if rows.empty:
        rows = losses[losses["split"] == "val"]
    if rows.empty:
        raise ReportError("Loss history has no validation rows")
    row = rows[rows["epoch"] == epoch] if epoch is not None else rows.tail(1)
    if row.empty:
        row = rows.tail(1)
    edges = snr_bin_edges(schedule, SNR_BINS)
    bins = row[[f"snr_bin_{i:02d}" for i in range(SNR_BINS)]].to_numpy()[0]
    return pd.DataFrame(
        {
            "bin": np.arange(SNR_BINS),
            "log_snr_low": edges[:-1],
            "log_snr_high": edges[1:],
            "log_snr": (edges[:-1] + edges[1:]) / 2.0,
            "loss": bins,
        }
    )


def probe_protocol(probe: Dict) -> str:
    """One line naming the probe schedule, flagged when it departs from 10 epochs at batch 512."""
    epochs, batch = probe["epochs"], probe["batch_size"]
    line = f"probe protocol: {epochs} epochs, batch {batch}, AdamW lr {probe['lr']:g}"
    if (epochs, batch) != (REFERENCE_PROBE_EPOCHS, REFERENCE_PROBE_BATCH_SIZE):
        line += (
            f" (desk deviation from the reference {REFERENCE_PROBE_EPOCHS} epochs, "
            f"batch {REFERENCE_PROBE_BATCH_SIZE})"
        )
    return line


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return "n/a"
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def _ood_report(layout: RunLayout, manifest: RunManifest) -> RunReport:
    _require({"probe/ood.json": layout.ood_result})
    result = json.loads(layout.ood_result.read_text())
    lines = [
        f"Run {layout.run_dir} (out-of-distribution probe, diffprobe {manifest.tool_version})",
        f"Source run: {result['source_run']} (checkpoint {result['source_checkpoint_sha256'][:12]})",
        f"Cell: t*={result['t_star']} ℓ*={result['ell_star']}",
        f"Test accuracy: {_fmt(result['test_acc'])}",
        f"Test Macro F1: {_fmt(result['test_macro_f1'])}",
    ]
    summary = "\n".join(lines)
    out = layout.report / "summary.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    pv.save_txt(summary, out)
    return RunReport(summary=summary, files={"summary": out})


def report(manifest: RunManifest) -> RunReport:
    """
    Write ``report/summary.txt`` and the CSVs for the probe grid, the loss
    curves, the per-SNR validation loss and accuracy against log-SNR.

    Raises:
        ReportError: listing every missing artifact by name
    """
    layout = RunLayout(Path(manifest.run_dir))
    config = _run_config(manifest)
    if config.get("mode") == "ood":
        return _ood_report(layout, manifest)

    _require(
        {
            "train/losses.csv": layout.loss_csv,
            "train/training_summary.json": layout.training_summary,
            "probe/sweep.csv": layout.sweep_csv,
            "probe/selection.json": layout.selection,
        }
    )
    schedule = schedule_for(config)
    losses = pd.read_csv(layout.loss_csv)
    training = json.loads(layout.training_summary.read_text())
    sweep = pd.read_csv(layout.sweep_csv)
    selection = json.loads(layout.selection.read_text())
    best_epoch = training.get("best_epoch")

    out = layout.report
    out.mkdir(parents=True, exist_ok=True)
    files: Dict[str, Path] = {}

    def emit(name: str, frame: pd.DataFrame) -> None:
        path = out / f"{name}.csv"
        frame.to_csv(path, index=False)
        files[name] = path

    for split in sorted(sweep["split"].unique()):
        emit(f"grid_{split}", grid_table(sweep, split))
    curves = loss_curves(losses, best_epoch)
    emit("loss_curves", curves)
    has_val = losses["split"].isin(["val", "val_ema"]).any()
    if has_val:
        emit("snr_loss", snr_loss_curve(losses, schedule, best_epoch))
    emit("accuracy_vs_log_snr", accuracy_vs_log_snr(sweep, schedule, selection["ell_star"]))

    lines = [
        f"Run {layout.run_dir} ({config.get('mode')}, diffprobe {manifest.tool_version})",
        f"Weighting: {config['weighting']['kind']}, schedule: {config['schedule']['kind']} "
        f"T={config['schedule']['T']}",
        "",
        "Training",
        f"  epochs: {training['epochs']}, steps: {training['steps']}, "
        f"parameters: {training['parameters']:,}",
        f"  best epoch: {best_epoch} (selected by {training['selected_by']}, "
        f"loss {_fmt(training.get('best_loss'))})",
        f"  final train loss: {_fmt(float(curves['train_loss'].iloc[-1]))}",
    ]
    if "frechet" in curves and curves["frechet"].notna().any():
        last = curves.dropna(subset=["frechet"]).iloc[-1]
        lines.append(f"  Fréchet diagnostic at epoch {int(last['epoch'])}: {_fmt(float(last['frechet']))}")
    lines += [
        "",
        "Linear probe",
        f"  {probe_protocol(config['probe'])}",
        f"  selected cell: t*={selection['t_star']} ℓ*={selection['ell_star']}",
        f"  validation accuracy: {_fmt(selection['val_acc'])}",
        f"  test accuracy: {_fmt(selection['test_acc'])}",
        f"  test Macro F1: {_fmt(selection['test_macro_f1'])}",
        "",
    ]
    if layout.cluster_report.exists():
        cluster = json.loads(layout.cluster_report.read_text())
        mean, std = cluster["mean"], cluster["std"]
        lines.append(f"Clustering (k={cluster['k']}, {len(cluster['runs'])} runs, mean ± std)")
        for name in ("nmi", "ari", "purity", "v_measure", "silhouette"):
            lines.append(f"  {name}: {_fmt(mean.get(name))} ± {_fmt(std.get(name))}")
        lines.append(f"  Hungarian accuracy: {_fmt(cluster['hungarian_accuracy'])}")
        lines.append(f"  majority-vote accuracy: {_fmt(cluster['majority_vote_accuracy'])}")
    else:
        lines.append("Clustering: stage not run, section omitted")
    if manifest.cache_hits:
        lines += ["", f"Cached stages: {', '.join(manifest.cache_hits)}"]

    summary = "\n".join(lines)
    pv.save_txt(summary, out / "summary.txt")
    files["summary"] = out / "summary.txt"
    logger.info(f"Report written to {out}")
    return RunReport(summary=summary, files=files)


def _ablation_label(config: Dict, fallback: str) -> str:
    return config.get("weighting", {}).get("kind", fallback)


def join_ablation(run_a: Path, run_b: Path, out_dir: Optional[Path] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Join two runs' per-SNR validation loss and accuracy-vs-log-SNR curves
    on log-SNR, with columns suffixed by each run's weighting kind.
    """
    frames: List[Tuple[str, pd.DataFrame, pd.DataFrame]] = []
    for fallback, run_dir in (("a", run_a), ("b", run_b)):
        layout = RunLayout(Path(run_dir))
        _require(
            {
                f"{run_dir}/manifest.json": layout.manifest,
                f"{run_dir}/train/losses.csv": layout.loss_csv,
                f"{run_dir}/probe/sweep.csv": layout.sweep_csv,
                f"{run_dir}/probe/selection.json": layout.selection,
            }
        )
        manifest = RunManifest.load(layout.manifest)
        config = _run_config(manifest)
        schedule = schedule_for(config)
        training = json.loads(layout.training_summary.read_text()) if layout.training_summary.exists() else {}
        selection = json.loads(layout.selection.read_text())
        snr = snr_loss_curve(pd.read_csv(layout.loss_csv), schedule, training.get("best_epoch"))
        acc = accuracy_vs_log_snr(pd.read_csv(layout.sweep_csv), schedule, selection["ell_star"])
        frames.append((_ablation_label(config, fallback), snr, acc))

    (label_a, snr_a, acc_a), (label_b, snr_b, acc_b) = frames
    if label_a == label_b:
        label_a, label_b = f"{label_a}_a", f"{label_b}_b"

    snr = snr_a[["bin", "log_snr", "loss"]].merge(
        snr_b[["bin", "log_snr", "loss"]], on=["bin", "log_snr"], how="outer",
        suffixes=(f"_{label_a}", f"_{label_b}"),
    )
    accuracy = acc_a.merge(acc_b, on=["t", "log_snr"], how="outer", suffixes=(f"_{label_a}", f"_{label_b}"))
    accuracy = accuracy.sort_values("log_snr", ignore_index=True)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        snr.to_csv(out_dir / "ablation_snr_loss.csv", index=False)
        accuracy.to_csv(out_dir / "ablation_accuracy.csv", index=False)
    return snr, accuracy
