from pathlib import Path

from diffprobe.run_layout import RunLayout


def test_run_layout_paths():
    layout = RunLayout(run_dir=Path("runs/a"))

    assert layout.config_snapshot == Path("runs/a/config.yaml")
    assert layout.manifest == Path("runs/a/manifest.json")
    assert layout.log_file == Path("runs/a/logs/diffprobe.log")
    assert layout.stage_record("train") == Path("runs/a/stages/train.json")
    assert layout.split_images("val") == Path("runs/a/data/val.dpim")
    assert layout.split_labels("val") == Path("runs/a/data/val_labels.txt")
    assert layout.split_records("test") == Path("runs/a/data/test_records.csv")
    assert layout.label_map == Path("runs/a/data/label_map.txt")
    assert layout.loss_csv == Path("runs/a/train/losses.csv")
    assert layout.best_checkpoint == Path("runs/a/train/checkpoints/best.dprb")
    assert layout.epoch_checkpoint(7) == Path("runs/a/train/checkpoints/epoch_0007.dprb")
    assert layout.feature_dir("train") == Path("runs/a/features/train")
    assert layout.sweep_csv == Path("runs/a/probe/sweep.csv")
    assert layout.selection == Path("runs/a/probe/selection.json")
    assert layout.cluster_report == Path("runs/a/cluster/report.json")
    assert layout.report == Path("runs/a/report")
    assert layout.ood_result == Path("runs/a/probe/ood.json")
    assert layout.pca_overlays == Path("runs/a/cluster/pca")
