import pytest

from diffprobe.hashing import file_sha256
from diffprobe.manifest import ManifestError, RunManifest, StageEntry


@pytest.fixture
def manifest(tmp_path):
    return RunManifest(run_dir=str(tmp_path), config_snapshot="seed: 0\n")


def test_record_artifact_stores_relative_path_and_hash(manifest, tmp_path):
    path = tmp_path / "train" / "checkpoints" / "best.dprb"
    path.parent.mkdir(parents=True)
    path.write_bytes(b"weights")

    entry = manifest.record_artifact("train", "best", path, kind="checkpoint")

    assert entry.path == "train/checkpoints/best.dprb"
    assert entry.sha256 == file_sha256(path)
    assert manifest.checkpoint_hashes == {"best": entry.sha256}
    assert manifest.dataset_hashes == {}


def test_record_missing_artifact(manifest, tmp_path):
    with pytest.raises(ManifestError, match="Cannot hash artifact best"):
        manifest.record_artifact("train", "best", tmp_path / "nope.dprb")


def test_latest_entries_win(manifest, tmp_path):
    path = tmp_path / "a.txt"
    path.write_text("1")
    manifest.record_artifact("data", "a", path)
    path.write_text("2")
    second = manifest.record_artifact("data", "a", path)
    assert manifest.artifact("a") == second

    manifest.record_stage(StageEntry("data", "k1", "failed", 0.1, error="boom"))
    manifest.record_stage(StageEntry("data", "k2", "ran", 0.2))
    assert manifest.stage("data").key == "k2"
    assert manifest.has_stage("data")
    assert not manifest.has_stage("train")

    with pytest.raises(ManifestError, match="Artifact b is not listed"):
        manifest.artifact("b")
    with pytest.raises(ManifestError, match="Stage train is not listed"):
        manifest.stage("train")


def test_cache_hits(manifest):
    manifest.record_stage(StageEntry("data", "k", "cached", 0.0))
    manifest.record_stage(StageEntry("train", "k", "ran", 1.0))
    assert manifest.cache_hits == ["data"]


def test_save_and_load(manifest, tmp_path):
    path = tmp_path / "file.csv"
    path.write_text("x\n1\n")
    manifest.record_artifact("sweep", "table", path, kind="table")
    manifest.record_stage(StageEntry("sweep", "abc", "ran", 1.5))

    loaded = RunManifest.load(manifest.save(tmp_path / "manifest.json"))

    assert loaded == manifest
    assert loaded.content_hashes() == {"table": file_sha256(path)}


def test_load_errors(tmp_path):
    with pytest.raises(ManifestError, match="Cannot read manifest"):
        RunManifest.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ManifestError, match="Cannot read manifest"):
        RunManifest.load(tmp_path / "bad.json")
