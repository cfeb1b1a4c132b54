from dataclasses import dataclass
from pathlib import Path

__all__ = ["RunLayout"]


@dataclass(frozen=True)
class RunLayout:
    run_dir: Path

    @property
    def config_snapshot(self) -> Path:
        return self.run_dir / "config.yaml"

    @property
    def manifest(self) -> Path:
        return self.run_dir / "manifest.json"

    @property
    def logs(self) -> Path:
        return self.run_dir / "logs"

    @property
    def log_file(self) -> Path:
        return self.logs / "diffprobe.log"

    @property
    def stages(self) -> Path:
        return self.run_dir / "stages"

    def stage_record(self, stage: str) -> Path:
        return self.stages / f"{stage}.json"

    @property
    def data(self) -> Path:
        return self.run_dir / "data"

    def split_images(self, split: str) -> Path:
        return self.data / f"{split}.dpim"

    def split_labels(self, split: str) -> Path:
        return self.data / f"{split}_labels.txt"

    def split_records(self, split: str) -> Path:
        return self.data / f"{split}_records.csv"

    @property
    def label_map(self) -> Path:
        return self.data / "label_map.txt"

    @property
    def dataset_info(self) -> Path:
        return self.data / "dataset.json"

    @property
    def train(self) -> Path:
        return self.run_dir / "train"

    @property
    def checkpoints(self) -> Path:
        return self.train / "checkpoints"

    def epoch_checkpoint(self, epoch: int) -> Path:
        return self.checkpoints / f"epoch_{epoch:04d}.dprb"

    @property
    def best_checkpoint(self) -> Path:
        return self.checkpoints / "best.dprb"

    @property
    def last_checkpoint(self) -> Path:
        return self.checkpoints / "last.dprb"

    @property
    def loss_csv(self) -> Path:
        return self.train / "losses.csv"

    @property
    def training_summary(self) -> Path:
        return self.train / "training_summary.json"

    @property
    def samples(self) -> Path:
        return self.run_dir / "samples"

    @property
    def features(self) -> Path:
        return self.run_dir / "features"

    def feature_dir(self, split: str) -> Path:
        return self.features / split

    @property
    def probe(self) -> Path:
        return self.run_dir / "probe"

    @property
    def sweep_csv(self) -> Path:
        return self.probe / "sweep.csv"

    @property
    def selection(self) -> Path:
        return self.probe / "selection.json"

    @property
    def ood_result(self) -> Path:
        return self.probe / "ood.json"

    @property
    def cluster(self) -> Path:
        return self.run_dir / "cluster"

    @property
    def cluster_report(self) -> Path:
        return self.cluster / "report.json"

    @property
    def report(self) -> Path:
        return self.run_dir / "report"

    @property
    def pca_overlays(self) -> Path:
        return self.cluster / "pca"
