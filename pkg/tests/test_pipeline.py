import copy
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from diffprobe.config import WeightingSection, parse_experiment_config
from diffprobe.hashing import file_sha256
from diffprobe.image_io import read_dpim
from diffprobe.manifest import RunManifest
from diffprobe.pipeline import STAGES, StageError, run_pipeline, sample_checkpoint, stage_key
from diffprobe.run_layout import RunLayout
from tests.conftest import TINY_CONFIG


def _copy_run(config, destination):
    shutil.copytree(config.output_dir, destination)
    return config.model_copy(update={"output_dir": str(destination)})


def _statuses(manifest):
    return {s.name: s.status for s in manifest.stages}


def test_stage_key_follows_its_sections(tiny_config):
    key = stage_key(tiny_config, "data", {})
    other_weighting = tiny_config.model_copy(update={"weighting": WeightingSection(kind="mse")})
    assert stage_key(other_weighting, "data", {}) == key
    assert stage_key(other_weighting, "train", {}) != stage_key(tiny_config, "train", {})
    assert stage_key(tiny_config, "data", {"x": "1"}) != key


class TestFinishedRun:
    def test_every_stage_ran(self, finished_run):
        _, manifest = finished_run
        assert [s.name for s in manifest.stages] == list(STAGES)
        assert all(s.status == "ran" for s in manifest.stages)

    def test_artifacts(self, finished_run):
        config, manifest = finished_run
        layout = RunLayout(Path(config.output_dir))

        assert "train/checkpoints/best.dprb" in manifest.checkpoint_hashes
        assert "data/train.dpim" in manifest.dataset_hashes
        assert RunManifest.load(layout.manifest) == manifest

        selection = json.loads(layout.selection.read_text())
        assert selection["t_star"] in config.sweep.timesteps
        assert 1 <= selection["ell_star"] <= 4
        assert layout.cluster_report.exists()
        assert (layout.feature_dir("test") / "grid.json").exists()
        assert len(list(layout.pca_overlays.glob("*_pca.ppm"))) == config.cluster.pca_images

    def test_stage_records(self, finished_run):
        config, manifest = finished_run
        layout = RunLayout(Path(config.output_dir))
        for stage in manifest.stages:
            record = json.loads(layout.stage_record(stage.name).read_text())
            assert record["key"] == stage.key
            assert all(not o["path"].startswith("/") for o in record["outputs"])


class TestCaching:
    def test_rerun_is_fully_cached(self, finished_run, tmp_path):
        config, manifest = finished_run
        config = _copy_run(config, tmp_path / "copy")

        rerun = run_pipeline(config)

        assert rerun.cache_hits == list(STAGES)
        assert rerun.content_hashes() == manifest.content_hashes()

    def test_weighting_change_retrains_but_keeps_data(self, finished_run, tmp_path):
        config, manifest = finished_run
        config = _copy_run(config, tmp_path / "copy")
        config = config.model_copy(update={"weighting": WeightingSection(kind="mse")})

        rerun = run_pipeline(config, stop_after="train")

        assert _statuses(rerun) == {"data": "cached", "train": "ran"}
        assert rerun.dataset_hashes == manifest.dataset_hashes

    def test_modified_output_reruns_stage(self, finished_run, tmp_path):
        config, _ = finished_run
        config = _copy_run(config, tmp_path / "copy")
        layout = RunLayout(tmp_path / "copy")
        layout.selection.write_text("{}")

        rerun = run_pipeline(config)

        statuses = _statuses(rerun)
        assert [statuses[s] for s in ("data", "train", "extract")] == ["cached"] * 3
        assert statuses["sweep"] == "ran"
        assert "t_star" in json.loads(layout.selection.read_text())


def test_stop_after(tiny_config):
    manifest = run_pipeline(tiny_config, stop_after="data")
    layout = RunLayout(Path(tiny_config.output_dir))

    assert [s.name for s in manifest.stages] == ["data"]
    assert RunManifest.load(layout.manifest).stage("data").status == "ran"
    assert not layout.train.exists()


def test_failed_stage_is_named_and_recorded(tiny_config_dict, tmp_path):
    tiny_config_dict["dataset"] = {
        "source": "directory",
        "path": str(tmp_path / "missing"),
        "image_size": 8,
    }
    config = parse_experiment_config(tiny_config_dict)

    with pytest.raises(StageError, match="Stage 'data' failed: Dataset directory not found") as info:
        run_pipeline(config)

    assert info.value.stage == "data"
    saved = RunManifest.load(RunLayout(tmp_path / "run").manifest)
    assert saved.stage("data").status == "failed"
    assert "Dataset directory not found" in saved.stage("data").error


def test_sample_checkpoint(finished_run, tmp_path):
    config, _ = finished_run
    best = RunLayout(Path(config.output_dir)).best_checkpoint

    out = sample_checkpoint(best, tmp_path / "samples", n=2, seed=0, steps=2)

    images = read_dpim(out / "samples.dpim")
    assert images.shape == (2, 1, 8, 8)
    assert 0.0 <= images.min() and images.max() <= 1.0
    assert sorted(p.name for p in out.glob("*.pgm")) == ["sample_000.pgm", "sample_001.pgm"]
    again = read_dpim(sample_checkpoint(best, tmp_path / "again", n=2, seed=0, steps=2) / "samples.dpim")
    np.testing.assert_array_equal(images, again)


def test_ood_probe_uses_source_cell(finished_run, tmp_path):
    source_config, _ = finished_run
    source = RunLayout(Path(source_config.output_dir))
    source_hash = file_sha256(source.best_checkpoint)

    target = copy.deepcopy(TINY_CONFIG)
    target.update(
        mode="ood",
        seed=7,
        output_dir=str(tmp_path / "target"),
        ood={"source_run": str(source.run_dir)},
    )
    target["dataset"]["synthetic"] = {"k": 2, "n_per_class": 10}
    manifest = run_pipeline(parse_experiment_config(target))

    assert [s.name for s in manifest.stages] == ["data", "extract", "probe_ood"]
    result = json.loads(RunLayout(tmp_path / "target").ood_result.read_text())
    selection = json.loads(source.selection.read_text())
    assert (result["t_star"], result["ell_star"]) == (selection["t_star"], selection["ell_star"])
    assert 0.0 <= result["test_acc"] <= 1.0
    assert not RunLayout(tmp_path / "target").feature_dir("val").exists()
    assert file_sha256(source.best_checkpoint) == source_hash


def test_fresh_runs_are_identical(tiny_config_dict, tmp_path):
    hashes = []
    for name in ("a", "b"):
        tiny_config_dict["output_dir"] = str(tmp_path / name)
        manifest = run_pipeline(parse_experiment_config(tiny_config_dict), stop_after="extract")
        hashes.append(manifest.content_hashes())
    assert hashes[0] == hashes[1]
