"""Append-only record of a run: config snapshot, stages and hashed artifacts."""

import json
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional

from diffprobe import __version__
from diffprobe.hashing import file_sha256

__all__ = ["ManifestError", "ArtifactEntry", "StageEntry", "RunManifest", "tool_version"]


class ManifestError(Exception):
    """Raised when a manifest cannot be read or would be rewritten."""

    pass


def tool_version() -> str:
    try:
        return metadata.version("diffprobe")
    except metadata.PackageNotFoundError:
        return __version__


@dataclass(frozen=True)
class ArtifactEntry:
    stage: str
    name: str
    path: str
    sha256: str
    kind: str = "artifact"


@dataclass(frozen=True)
class StageEntry:
    name: str
    key: str
    status: str
    seconds: float
    error: Optional[str] = None


@dataclass
class RunManifest:
    run_dir: str
    config_snapshot: str
    tool_version: str = field(default_factory=tool_version)
    stages: List[StageEntry] = field(default_factory=list)
    artifacts: List[ArtifactEntry] = field(default_factory=list)

    def record_stage(self, entry: StageEntry) -> StageEntry:
        self.stages.append(entry)
        return entry

    def record_artifact(self, stage: str, name: str, path: Path, kind: str = "artifact") -> ArtifactEntry:
        """List an artifact with its content hash; paths are stored relative to the run directory."""
        path = Path(path)
        try:
            digest = file_sha256(path)
        except OSError as e:
            raise ManifestError(f"Cannot hash artifact {name} at {path}: {e}") from e
        try:
            relative = str(path.relative_to(self.run_dir))
        except ValueError:
            relative = str(path)
        entry = ArtifactEntry(stage=stage, name=name, path=relative, sha256=digest, kind=kind)
        self.artifacts.append(entry)
        return entry

    def artifact(self, name: str) -> ArtifactEntry:
        """Most recent entry for ``name``."""
        for entry in reversed(self.artifacts):
            if entry.name == name:
                return entry
        raise ManifestError(f"Artifact {name} is not listed in the manifest")

    def has_stage(self, name: str) -> bool:
        return any(s.name == name and s.status in ("ran", "cached") for s in self.stages)

    def stage(self, name: str) -> StageEntry:
        for entry in reversed(self.stages):
            if entry.name == name:
                return entry
        raise ManifestError(f"Stage {name} is not listed in the manifest")

    @property
    def cache_hits(self) -> List[str]:
        return [s.name for s in self.stages if s.status == "cached"]

    @property
    def checkpoint_hashes(self) -> Dict[str, str]:
        return {a.name: a.sha256 for a in self.artifacts if a.kind == "checkpoint"}

    @property
    def dataset_hashes(self) -> Dict[str, str]:
        return {a.name: a.sha256 for a in self.artifacts if a.kind == "dataset"}

    def content_hashes(self) -> Dict[str, str]:
        """Name → hash of every artifact; wall-clock times are excluded."""
        return {a.name: a.sha256 for a in self.artifacts}

    def to_dict(self) -> Dict:
        return {
            "run_dir": self.run_dir,
            "tool_version": self.tool_version,
            "config_snapshot": self.config_snapshot,
            "stages": [asdict(s) for s in self.stages],
            "artifacts": [asdict(a) for a in self.artifacts],
        }

    def save(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ManifestError(f"Cannot read manifest {path}: {e}") from e
        return cls(
            run_dir=raw["run_dir"],
            config_snapshot=raw["config_snapshot"],
            tool_version=raw["tool_version"],
            stages=[StageEntry(**s) for s in raw["stages"]],
            artifacts=[ArtifactEntry(**a) for a in raw["artifacts"]],
        )
