import json

import numpy as np
import pandas as pd
import pytest
import torch

from diffprobe.checkpoint import load_checkpoint
from diffprobe.diffusion import SNR_BINS, DiffusionError, to_model_range
from diffprobe.record import LabeledImageSet
from diffprobe.run_layout import RunLayout
from diffprobe.schedule import WeightingPolicy, build_schedule
from diffprobe.training import (
    TrainState,
    build_denoiser,
    loss_columns,
    train_loop,
    validation_loss,
)


def _row(epoch, split, loss):
    return {"epoch": epoch, "split": split, "loss": loss, "lr": 0.0}


class TestTrainState:
    def test_best_epoch_uses_ema_validation(self):
        state = TrainState(ema_decay=0.999)
        for epoch, (train, val, val_ema) in enumerate([(1.0, 0.9, 0.8), (0.5, 0.4, 0.6), (0.3, 0.5, 0.7)], 1):
            state.append(_row(epoch, "train", train))
            state.append(_row(epoch, "val", val))
            state.append(_row(epoch, "val_ema", val_ema))
        assert state.best_epoch == 1
        assert state.val_history() == [0.8, 0.6, 0.7]

    def test_best_epoch_falls_back_to_train_loss(self):
        state = TrainState(ema_decay=0.999)
        state.append(_row(1, "train", 0.5))
        state.append(_row(2, "train", 0.2))
        assert state.best_epoch == 2

    def test_ties_go_to_the_earlier_epoch(self):
        state = TrainState(ema_decay=0.999)
        state.append(_row(1, "val_ema", 0.5))
        state.append(_row(2, "val_ema", 0.5))
        assert state.best_epoch == 1

    def test_non_finite_losses_are_ignored(self):
        state = TrainState(ema_decay=0.999)
        assert state.best_epoch is None
        state.append(_row(1, "val_ema", float("nan")))
        state.append(_row(2, "val_ema", 0.9))
        assert state.best_epoch == 2


def test_loss_columns():
    columns = loss_columns()
    assert columns[:4] == ["epoch", "split", "loss", "lr"]
    assert columns[4] == "snr_bin_00"
    assert columns[-2] == f"snr_bin_{SNR_BINS - 1:02d}"
    assert columns[-1] == "frechet"


def test_build_denoiser_is_seeded_and_leaves_global_rng(tiny_config):
    before = torch.random.get_rng_state()
    a = build_denoiser(tiny_config)
    b = build_denoiser(tiny_config)
    assert torch.equal(torch.random.get_rng_state(), before)
    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), name


def test_validation_loss_is_a_fixed_draw(tiny_config, image_set_factory):
    model = build_denoiser(tiny_config).eval()
    schedule = build_schedule("cosine", tiny_config.schedule.T)
    x_val = to_model_range(torch.from_numpy(image_set_factory(n_per_class=3).images))

    first = validation_loss(model, schedule, WeightingPolicy(), x_val, seed=0, batch_size=4)
    second = validation_loss(model, schedule, WeightingPolicy(), x_val, seed=0, batch_size=5)
    assert first[0] == pytest.approx(second[0], rel=1e-6)
    np.testing.assert_array_equal(first[1], second[1])
    assert first[1].min() >= 1 and first[1].max() <= tiny_config.schedule.T

    other_seed = validation_loss(model, schedule, WeightingPolicy(), x_val, seed=1, batch_size=4)
    assert not np.array_equal(first[1], other_seed[1])


def test_validation_loss_of_empty_split(tiny_config):
    model = build_denoiser(tiny_config).eval()
    schedule = build_schedule("cosine", tiny_config.schedule.T)
    loss, ts, per_item = validation_loss(
        model, schedule, WeightingPolicy(), torch.zeros(0, 1, 8, 8), seed=0, batch_size=4
    )
    assert np.isnan(loss)
    assert len(ts) == len(per_item) == 0


@pytest.fixture
def trained(tiny_config, image_set_factory, tmp_path):
    train_set = image_set_factory(n_per_class=8, seed=1)
    val_set = image_set_factory(n_per_class=2, seed=2, prefix="val")
    layout = RunLayout(tmp_path / "train_run")
    return layout, train_loop(tiny_config, train_set, val_set, layout)


class TestTrainLoop:
    def test_loss_history(self, trained, tiny_config):
        layout, result = trained
        history = pd.read_csv(layout.loss_csv)

        assert list(history.columns) == loss_columns()
        assert len(history) == 3 * tiny_config.train.epochs
        assert history["split"].tolist()[:3] == ["train", "val", "val_ema"]
        assert np.isfinite(history["loss"]).all()
        assert history.loc[history["split"] == "train", "snr_bin_00"].isna().all()

        frechet = history.loc[history["split"] == "val_ema", "frechet"].tolist()
        assert np.isnan(frechet[0])
        assert np.isfinite(frechet[1]) and frechet[1] >= 0.0

    def test_checkpoints_and_summary(self, trained, tiny_config):
        layout, result = trained
        assert layout.best_checkpoint.exists() and layout.last_checkpoint.exists()
        for epoch in range(1, tiny_config.train.epochs + 1):
            assert layout.epoch_checkpoint(epoch).exists()

        summary = json.loads(layout.training_summary.read_text())
        assert summary["selected_by"] == "val_ema"
        assert summary["best_epoch"] == result.best_epoch
        assert summary["steps"] == tiny_config.train.epochs * 2
        checkpoint = load_checkpoint(layout.best_checkpoint)
        assert checkpoint.sha256 == result.best_checkpoint
        assert checkpoint.extra["epoch"] == result.best_epoch

    def test_training_is_reproducible(self, trained, tiny_config, image_set_factory, tmp_path):
        layout, result = trained
        again = train_loop(
            tiny_config,
            image_set_factory(n_per_class=8, seed=1),
            image_set_factory(n_per_class=2, seed=2, prefix="val"),
            RunLayout(tmp_path / "again"),
        )
        assert [r["loss"] for r in again.state.history] == [r["loss"] for r in result.state.history]
        assert again.best_checkpoint == result.best_checkpoint

    def test_empty_training_split(self, tiny_config, tmp_path):
        empty = LabeledImageSet.empty(8, {0: "class_0"})
        with pytest.raises(DiffusionError, match="Training split is empty"):
            train_loop(tiny_config, empty, empty, RunLayout(tmp_path / "empty"))
