"""Denoiser training: AdamW with cosine decay, EMA, epoch-level validation,
per-SNR loss bins, the overfitting panel and best-validation checkpointing."""

import json
import math
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import polvo as pv
import torch
from loguru import logger

from diffprobe.checkpoint import save_checkpoint
from diffprobe.cluster import frechet_diagnostic, pooled_pixel_features
from diffprobe.config import ExperimentConfig
from diffprobe.denoiser import Denoiser, parameter_count
from diffprobe.diffusion import (
    SNR_BINS,
    DiffusionError,
    bin_losses_by_snr,
    ddim_sample,
    to_model_range,
    training_loss,
)
from diffprobe.hashing import derive_seed, derived_generator, derived_rng
from diffprobe.layers import ParamStore, adamw_step, cosine_lr, ema_update
from diffprobe.record import LabeledImageSet
from diffprobe.run_layout import RunLayout
from diffprobe.schedule import (
    NoiseSchedule,
    TimestepSampler,
    WeightingPolicy,
    build_sampler,
    build_schedule,
)

__all__ = [
    "TrainState",
    "TrainResult",
    "build_denoiser",
    "validation_loss",
    "train_loop",
    "loss_columns",
]

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def loss_columns(bins: int = SNR_BINS) -> List[str]:
    return ["epoch", "split", "loss", "lr"] + [f"snr_bin_{i:02d}" for i in range(bins)] + [
        "frechet"
    ]


@dataclass
class TrainState:
    """Mutable loop state; ``history`` only ever grows and ``step`` only increases."""

    ema_decay: float
    step: int = 0
    epoch: int = 0
    running_loss: float = float("nan")
    history: List[Dict] = field(default_factory=list)

    def append(self, row: Dict) -> None:
        self.history.append(row)

    def val_history(self, split: str = "val_ema") -> List[float]:
        return [row["loss"] for row in self.history if row["split"] == split]

    @property
    def best_epoch(self) -> Optional[int]:
        """Epoch with the lowest EMA validation loss (train loss when there is no validation set)."""
        for split in ("val_ema", "train"):
            rows = [r for r in self.history if r["split"] == split and np.isfinite(r["loss"])]
            if rows:
                return min(rows, key=lambda r: (r["loss"], r["epoch"]))["epoch"]
        return None


@dataclass(frozen=True)
class TrainResult:
    state: TrainState
    best_checkpoint: str
    best_epoch: Optional[int]
    summary: Dict


def build_denoiser(config: ExperimentConfig) -> Denoiser:
    """Fresh denoiser with weights drawn from a stream derived from the run seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "init") >> 1)
        return Denoiser(config.model, config.schedule.T, dtype=_DTYPES[config.train.dtype])


@torch.no_grad()
def validation_loss(
    model: Denoiser,
    schedule: NoiseSchedule,
    policy: WeightingPolicy,
    x0: torch.Tensor,
    seed: int,
    batch_size: int,
):
    """
    Weighted loss on a fixed draw of (t, ε) per validation image, with t
    uniform over 1..T so every SNR bin is populated.

    Returns (mean weighted loss, timesteps, per-item unweighted errors).
    """
    rng = derived_rng(seed, "validation")
    t_all = torch.from_numpy(rng.integers(1, schedule.T + 1, size=len(x0)))
    eps_all = torch.randn(x0.shape, generator=derived_generator(seed, "validation"), dtype=x0.dtype)
    uniform = TimestepSampler("uniform", np.full(schedule.T, 1.0 / schedule.T))

    total, ts, per_item = 0.0, [], []
    for start in range(0, len(x0), batch_size):
        sl = slice(start, start + batch_size)
        result = training_loss(
            model, schedule, policy, x0[sl], uniform, rng,
            t=t_all[sl], eps=eps_all[sl], backward=False,
        )
        total += result.loss * len(result.t)
        ts.append(result.t)
        per_item.append(result.per_item)
    if not ts:
        return float("nan"), np.zeros(0, np.int64), np.zeros(0)
    return total / len(x0), np.concatenate(ts), np.concatenate(per_item)


def _frechet(model: Denoiser, schedule: NoiseSchedule, config: ExperimentConfig, val_images, epoch: int) -> float:
    train = config.train
    if len(val_images) < 2 or train.frechet_samples < 2:
        return float("nan")
    generator = derived_generator(config.seed, "frechet", epoch)
    samples = ddim_sample(
        model, schedule, train.frechet_samples,
        steps=min(train.frechet_ddim_steps, schedule.T), eta=0.0, generator=generator,
    )
    return frechet_diagnostic(pooled_pixel_features(samples), pooled_pixel_features(val_images))


def _write_history(state: TrainState, layout: RunLayout) -> None:
    try:
        layout.loss_csv.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(state.history, columns=loss_columns()).to_csv(layout.loss_csv, index=False)
    except OSError as e:
        raise DiffusionError(f"Failed to write loss history {layout.loss_csv}: {e}") from e


def train_loop(
    config: ExperimentConfig,
    train_set: LabeledImageSet,
    val_set: LabeledImageSet,
    layout: RunLayout,
) -> TrainResult:
    """
    Train on the unlabeled training split and checkpoint by validation loss.

    Per epoch the loss CSV receives one row per split: ``train`` (mean
    minibatch loss), ``val`` (live weights) and ``val_ema`` (EMA weights),
    each with the unweighted validation error binned over 20 equal-width
    log-SNR bins. The best checkpoint is the epoch with the lowest EMA
    validation loss.
    """
    tc = config.train
    dtype = _DTYPES[tc.dtype]
    schedule = build_schedule(config.schedule.kind, config.schedule.T, config.schedule.offset_s)
    policy = WeightingPolicy(config.weighting.kind, config.weighting.gamma)
    sampler = build_sampler(config.sampler.kind, schedule, config.sampler.variant)

    model = build_denoiser(config)
    model.train()
    store = ParamStore(model)
    ema_update(store, tc.ema_decay)
    logger.info(f"Denoiser has {parameter_count(model):,} parameters")

    x_train = to_model_range(torch.from_numpy(train_set.images).to(dtype))
    x_val = to_model_range(torch.from_numpy(val_set.images).to(dtype))
    n = len(x_train)
    if n == 0:
        raise DiffusionError("Training split is empty")
    if len(x_val) == 0:
        logger.warning("Validation split is empty; selecting checkpoints by training loss")
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch

    state = TrainState(ema_decay=tc.ema_decay)
    snapshot = config.model_dump(mode="json", exclude={"output_dir", "workers"})
    best_loss, best_hash, lr = float("inf"), "", 0.0
    for epoch in pv.pbar(range(1, tc.epochs + 1)):
        state.epoch = epoch
        rng = derived_rng(config.seed, "train", epoch)
        generator = derived_generator(config.seed, "train", epoch)
        order = torch.from_numpy(rng.permutation(n))
        losses = []
        for start in range(0, n, tc.batch_size):
            lr = cosine_lr(state.step, total_steps, tc.lr, tc.warmup_frac)
            store.zero_grad()
            result = training_loss(
                model, schedule, policy, x_train[order[start : start + tc.batch_size]],
                sampler, rng, generator, step=state.step,
            )
            grad_norm = adamw_step(store, lr, *tc.betas, tc.weight_decay, tc.grad_clip)
            ema_update(store, tc.ema_decay)
            losses.append(result.loss)
            state.step += 1
            logger.debug(f"step {state.step}: loss {result.loss:.5f} |g| {grad_norm:.3f} lr {lr:.2e}")
        state.running_loss = float(np.mean(losses))

        model.eval()
        rows = [{"epoch": epoch, "split": "train", "loss": state.running_loss, "lr": lr}]
        if len(x_val):
            for split, use_ema in (("val", False), ("val_ema", True)):
                with store.swap_in_ema() if use_ema else nullcontext():
                    loss, ts, per_item = validation_loss(
                        model, schedule, policy, x_val, config.seed, tc.batch_size
                    )
                bins = bin_losses_by_snr(schedule, ts, per_item)
                rows.append(
                    {"epoch": epoch, "split": split, "loss": loss, "lr": lr}
                    | {f"snr_bin_{i:02d}": float(v) for i, v in enumerate(bins)}
                )
            if tc.frechet_every and epoch % tc.frechet_every == 0:
                with store.swap_in_ema():
                    rows[-1]["frechet"] = _frechet(model, schedule, config, val_set.images, epoch)
                logger.info(f"epoch {epoch}: Fréchet diagnostic {rows[-1]['frechet']:.4f}")
        model.train()
        for row in rows:
            state.append(row)
        _write_history(state, layout)

        selection_loss = rows[-1]["loss"] if len(x_val) else state.running_loss
        extra = {"epoch": epoch, "step": state.step, "losses": {r["split"]: r["loss"] for r in rows}}
        logger.info(
            f"epoch {epoch}/{tc.epochs}: "
            + ", ".join(f"{r['split']} {r['loss']:.5f}" for r in rows)
        )
        if tc.save_every and epoch % tc.save_every == 0:
            save_checkpoint(layout.epoch_checkpoint(epoch), model, store.shadow, snapshot, extra)
        if np.isfinite(selection_loss) and selection_loss < best_loss:
            best_loss = selection_loss
            best_hash = save_checkpoint(layout.best_checkpoint, model, store.shadow, snapshot, extra)
        save_checkpoint(layout.last_checkpoint, model, store.shadow, snapshot, extra)

    best_epoch = state.best_epoch
    summary = {
        "epochs": tc.epochs,
        "steps": state.step,
        "parameters": parameter_count(model),
        "best_epoch": best_epoch,
        "best_loss": best_loss if np.isfinite(best_loss) else None,
        "best_checkpoint": str(layout.best_checkpoint.relative_to(layout.run_dir)),
        "best_checkpoint_sha256": best_hash,
        "selected_by": "val_ema" if len(x_val) else "train",
    }
    layout.training_summary.write_text(json.dumps(summary, indent=2, sort_keys=True))
    logger.info(f"Training finished; best epoch {best_epoch} (loss {best_loss:.5f})")
    return TrainResult(state=state, best_checkpoint=best_hash, best_epoch=best_epoch, summary=summary)

