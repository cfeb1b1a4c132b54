"""Frozen-backbone descriptors φ_{t,ℓ}(x0) and their on-disk cache.

A DPFC1 cache file holds one (t, ℓ) cell: magic ``DPFC1``, a little-endian
u32 header length, a JSON header, then n·C little-endian f32 values.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import polvo as pv
import torch
from loguru import logger

from diffprobe.denoiser import Denoiser, FeatureTensor, ReadoutId, readout_table
from diffprobe.diffusion import corrupt, to_model_range
from diffprobe.hashing import derived_generator
from diffprobe.record import LabeledImageSet
from diffprobe.schedule import NoiseSchedule

__all__ = [
    "FeatureCacheError",
    "FeatureVector",
    "FeatureGrid",
    "NoisePolicy",
    "gap",
    "l2_normalize",
    "extract_grid",
    "feature_maps",
    "write_cell",
    "read_cell",
    "write_grid",
    "read_grid",
    "select_cell",
    "cell_filename",
]

MAGIC = b"DPFC1"
INDEX_FILE = "grid.json"

NoisePolicy = Literal["shared", "per_consumer"]
CellKey = Tuple[int, int]


class FeatureCacheError(Exception):
    """Raised when a feature cache is missing, corrupt or from another checkpoint."""

    pass


def gap(z: Union[FeatureTensor, torch.Tensor]) -> torch.Tensor:
    """Global average pooling over the two trailing spatial axes."""
    values = z.values if isinstance(z, FeatureTensor) else z
    return values.mean(dim=(-2, -1))


def l2_normalize(X: np.ndarray) -> np.ndarray:
    """Unit-norm rows; all-zero rows stay zero."""
    X = np.asarray(X)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    image_id: str
    t: int
    ell: int


@dataclass
class FeatureGrid:
    dataset_id: str
    checkpoint_hash: str
    split: str
    timesteps: List[int]
    readouts: List[ReadoutId]
    image_ids: List[str]
    noise_policy: NoisePolicy
    seed: int
    cells: Dict[CellKey, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def ells(self) -> List[int]:
        return [r.ell for r in self.readouts]

    def readout(self, ell: int) -> ReadoutId:
        for r in self.readouts:
            if r.ell == ell:
                return r
        raise FeatureCacheError(f"Readout ℓ={ell} not in grid")

    def vector(self, t: int, ell: int, row: int) -> FeatureVector:
        return FeatureVector(select_cell(self, t, ell)[row], self.image_ids[row], t, ell)


def select_cell(grid: FeatureGrid, t: int, ell: int) -> np.ndarray:
    try:
        return grid.cells[(int(t), int(ell))]
    except KeyError:
        raise FeatureCacheError(f"Missing feature cell (t={t}, ℓ={ell}) for split {grid.split}")


def _noise(seed: int, policy: NoisePolicy, consumer: str, image_id: str, t: int, shape, dtype):
    keys = ("extract", image_id, t) if policy == "shared" else ("extract", consumer, image_id, t)
    return torch.randn(shape, generator=derived_generator(seed, *keys), dtype=dtype)


@torch.no_grad()
def extract_grid(
    model: Denoiser,
    schedule: NoiseSchedule,
    images: LabeledImageSet,
    timesteps: Sequence[int],
    readouts: Sequence[ReadoutId],
    seed: int,
    checkpoint_hash: str,
    dataset_id: str,
    split: str,
    batch_size: int = 64,
    noise_policy: NoisePolicy = "shared",
    consumer: str = "probe",
) -> FeatureGrid:
    """
    One forward pass per (image, t) serves every requested readout.

    Each (image, t) draws its own ε from a stream derived from the seed and
    the image id, so results do not depend on batching. Rows follow the
    dataset order.
    """
    if model.training or any(p.requires_grad for p in model.parameters()):
        raise FeatureCacheError("Feature extraction requires a frozen denoiser in eval mode")
    for t in timesteps:
        schedule.check_timestep(t)

    readouts = sorted(readouts)
    dtype = next(model.parameters()).dtype
    ids = [r.image_id for r in images.records]
    x0_all = to_model_range(torch.from_numpy(images.images).to(dtype))
    n = len(images)

    cells: Dict[CellKey, np.ndarray] = {}
    for t in pv.pbar(list(timesteps)):
        chunks: Dict[int, List[np.ndarray]] = {r.ell: [] for r in readouts}
        for start in range(0, n, batch_size):
            x0 = x0_all[start : start + batch_size]
            batch_ids = ids[start : start + batch_size]
            eps = torch.stack(
                [
                    _noise(seed, noise_policy, consumer, image_id, int(t), x0.shape[1:], dtype)
                    for image_id in batch_ids
                ]
            )
            noised = corrupt(schedule, x0, int(t), eps=eps)
            _, taps = model.forward_with_readouts(noised.xt, noised.t, readouts)
            for readout, tensor in taps.items():
                chunks[readout.ell].append(gap(tensor).to(torch.float32).numpy())
        for ell, parts in chunks.items():
            if parts:
                cells[(int(t), ell)] = np.concatenate(parts)
            else:
                cells[(int(t), ell)] = np.zeros((0, _channels(model, ell)), np.float32)

    logger.info(
        f"Extracted {len(cells)} feature cells for {n} {split} images "
        f"({len(timesteps)} timesteps × {len(readouts)} readouts)"
    )
    return FeatureGrid(
        dataset_id=dataset_id,
        checkpoint_hash=checkpoint_hash,
        split=split,
        timesteps=[int(t) for t in timesteps],
        readouts=list(readouts),
        image_ids=ids,
        noise_policy=noise_policy,
        seed=seed,
        cells=cells,
    )


@torch.no_grad()
def feature_maps(
    model: Denoiser,
    schedule: NoiseSchedule,
    images: LabeledImageSet,
    t: int,
    readout: ReadoutId,
    seed: int,
    noise_policy: NoisePolicy = "shared",
    consumer: str = "cluster",
) -> torch.Tensor:
    """Un-pooled (n, C, H, W) activations at one cell, noised exactly as ``extract_grid`` noises them."""
    dtype = next(model.parameters()).dtype
    x0 = to_model_range(torch.from_numpy(images.images).to(dtype))
    eps = torch.stack(
        [
            _noise(seed, noise_policy, consumer, r.image_id, int(t), x0.shape[1:], dtype)
            for r in images.records
        ]
    )
    noised = corrupt(schedule, x0, int(t), eps=eps)
    _, taps = model.forward_with_readouts(noised.xt, noised.t, [readout])
    return taps[readout].values.to(torch.float32)


def _channels(model: Denoiser, ell: int) -> int:
    return next(info.channels for info in readout_table(model.config) if info.ell == ell)


def cell_filename(t: int, ell: int) -> str:
    return f"t{t:04d}_l{ell:02d}.dpfc"


def write_cell(path: Path, header: Dict, matrix: np.ndarray) -> Path:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    header = {**header, "n": int(matrix.shape[0]), "channels": int(matrix.shape[1])}
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        f.write(matrix.tobytes())
    return path


def read_cell(path: Path) -> Tuple[Dict, np.ndarray]:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FeatureCacheError(f"Cannot read feature cache {path}: {e}") from e
    if raw[: len(MAGIC)] != MAGIC:
        raise FeatureCacheError(f"{path} is not a DPFC1 feature cache")
    (length,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(raw[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FeatureCacheError(f"Corrupt header in {path}: {e}") from e
    data = raw[start + length :]
    n, channels = header["n"], header["channels"]
    if len(data) != n * channels * 4:
        raise FeatureCacheError(f"{path} is truncated: expected {n}×{channels} floats")
    return header, np.frombuffer(data, dtype="<f4").reshape(n, channels).astype(np.float32)


def _existing_index(directory: Path) -> Optional[Dict]:
    index = directory / INDEX_FILE
    if not index.exists():
        return None
    return json.loads(index.read_text())


_APPEND_KEYS = ("dataset_id", "split", "seed", "noise_policy", "image_ids")


def _check_append(existing: Dict, grid: FeatureGrid, directory: Path) -> None:
    if existing["checkpoint_hash"] != grid.checkpoint_hash:
        raise FeatureCacheError(
            f"Feature cache {directory} belongs to checkpoint {existing['checkpoint_hash'][:12]}, "
            f"refusing to add cells from {grid.checkpoint_hash[:12]}"
        )
    for key in _APPEND_KEYS:
        old, new = existing.get(key), getattr(grid, key)
        if old == new:
            continue
        if key == "image_ids":
            detail = f"{len(old or [])} other image ids, got {len(new)}"
        else:
            detail = f"{key}={old!r}, got {new!r}"
        raise FeatureCacheError(
            f"Feature cache {directory} holds {detail}; refusing to add cells"
        )


def write_grid(grid: FeatureGrid, directory: Path) -> Path:
    """
    Write every cell plus an index.

    Cells may be added to an existing cache only from the same checkpoint,
    dataset, split, seed, noise policy and image order.
    """
    existing = _existing_index(directory)
    if existing is not None:
        _check_append(existing, grid, directory)
    directory.mkdir(parents=True, exist_ok=True)
    for (t, ell), matrix in sorted(grid.cells.items()):
        readout = grid.readout(ell)
        header = {
            "checkpoint_hash": grid.checkpoint_hash,
            "dataset_id": grid.dataset_id,
            "split": grid.split,
            "t": t,
            "r": readout.stage,
            "b": readout.block,
            "ell": ell,
            "noise_policy": grid.noise_policy,
            "seed": grid.seed,
        }
        write_cell(directory / cell_filename(t, ell), header, matrix)

    index_path = directory / INDEX_FILE
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    index.update(
        {
            "checkpoint_hash": grid.checkpoint_hash,
            "dataset_id": grid.dataset_id,
            "split": grid.split,
            "noise_policy": grid.noise_policy,
            "seed": grid.seed,
            "blocks_per_stage": grid.readouts[0].blocks_per_stage if grid.readouts else 3,
            "image_ids": grid.image_ids,
            "timesteps": sorted(set(index.get("timesteps", [])) | set(grid.timesteps)),
            "ells": sorted(set(index.get("ells", [])) | set(grid.ells)),
        }
    )
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True))
    return directory


def read_grid(
    directory: Path,
    checkpoint_hash: Optional[str] = None,
    timesteps: Optional[Sequence[int]] = None,
    ells: Optional[Sequence[int]] = None,
) -> FeatureGrid:
    """Load a cache directory; every requested cell must exist."""
    index_path = directory / INDEX_FILE
    if not index_path.exists():
        raise FeatureCacheError(f"No feature cache at {directory}")
    index = json.loads(index_path.read_text())
    if checkpoint_hash is not None and index["checkpoint_hash"] != checkpoint_hash:
        raise FeatureCacheError(
            f"Feature cache {directory} was extracted with checkpoint "
            f"{index['checkpoint_hash'][:12]}, expected {checkpoint_hash[:12]}"
        )
    timesteps = list(timesteps) if timesteps is not None else index["timesteps"]
    ells = list(ells) if ells is not None else index["ells"]
    blocks = index.get("blocks_per_stage", 3)

    cells = {}
    for t in timesteps:
        for ell in ells:
            path = directory / cell_filename(t, ell)
            if not path.exists():
                raise FeatureCacheError(f"Missing feature cell (t={t}, ℓ={ell}) at {path}")
            _, cells[(int(t), int(ell))] = read_cell(path)

    return FeatureGrid(
        dataset_id=index["dataset_id"],
        checkpoint_hash=index["checkpoint_hash"],
        split=index["split"],
        timesteps=[int(t) for t in timesteps],
        readouts=[ReadoutId.from_ell(int(ell), blocks) for ell in ells],
        image_ids=index["image_ids"],
        noise_policy=index["noise_policy"],
        seed=index["seed"],
        cells=cells,
    )
