"""DPRB1 checkpoint files: live and EMA parameters plus the training config.

Layout: magic ``DPRB1``, a little-endian u32 manifest length, the JSON
manifest, then every tensor as little-endian raw bytes. Manifest entries
give name, group (live or ema), dtype, shape and byte offset into the
data section.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch
from loguru import logger

from diffprobe.config import DenoiserConfig
from diffprobe.denoiser import Denoiser
from diffprobe.hashing import file_sha256

__all__ = ["CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"DPRB1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TORCH_TO_CODE = {torch.float32: "f32", torch.float64: "f64"}


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be written or read."""

    pass


@dataclass
class Checkpoint:
    path: Path
    sha256: str
    config: Dict[str, Any]
    extra: Dict[str, Any]
    live: Dict[str, torch.Tensor] = field(repr=False)
    ema: Dict[str, torch.Tensor] = field(repr=False)

    @property
    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig.model_validate(self.config["model"])

    @property
    def num_timesteps(self) -> int:
        return int(self.config["schedule"]["T"])

    def build_denoiser(self, use_ema: bool = True) -> Denoiser:
        """A frozen denoiser in eval mode, loaded with EMA (default) or live weights."""
        weights = self.ema if use_ema and self.ema else self.live
        dtype = next(iter(weights.values())).dtype
        model = Denoiser(self.denoiser_config, self.num_timesteps, dtype=dtype)
        model.load_state_dict(weights)
        model.eval()
        model.requires_grad_(False)
        return model


def _tensor_entries(group: str, tensors: Dict[str, torch.Tensor], offset: int):
    entries, blobs = [], []
    for name, tensor in tensors.items():
        code = _TORCH_TO_CODE.get(tensor.dtype)
        if code is None:
            raise CheckpointError(f"Unsupported dtype {tensor.dtype} for {name}")
        blob = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[code]).tobytes()
        entries.append(
            {
                "name": name,
                "group": group,
                "dtype": code,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs, offset


def save_checkpoint(
    path: Path,
    model: Denoiser,
    shadow: Optional[Dict[str, torch.Tensor]],
    config: Dict[str, Any],
    extra: Optional[Dict[str, Any]] = None,
) -> str:
    """Write a checkpoint and return its sha256."""
    live = {name: p for name, p in model.state_dict().items()}
    live_entries, live_blobs, offset = _tensor_entries("live", live, 0)
    ema_entries, ema_blobs, _ = _tensor_entries("ema", shadow or {}, offset)
    manifest = {
        "format": MAGIC.decode(),
        "config": config,
        "extra": extra or {},
        "tensors": live_entries + ema_entries,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for blob in live_blobs + ema_blobs:
                f.write(blob)
        tmp.replace(path)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e

    digest = file_sha256(path)
    logger.info(f"Saved checkpoint {path} ({digest[:12]})")
    return digest


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}") from e

    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a DPRB1 checkpoint")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        manifest = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt manifest in {path}: {e}") from e
    data = memoryview(raw)[start + header_len :]

    groups: Dict[str, Dict[str, torch.Tensor]] = {"live": {}, "ema": {}}
    for entry in manifest["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        end = entry["offset"] + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"Truncated tensor {entry['name']} in {path}")
        array = np.frombuffer(data[entry["offset"] : end], dtype=dtype)
        tensor = torch.from_numpy(array.reshape(entry["shape"]).copy())
        groups[entry["group"]][entry["name"]] = tensor

    return Checkpoint(
        path=path,
        sha256=file_sha256(path),
        config=manifest["config"],
        extra=manifest["extra"],
        live=groups["live"],
        ema=groups["ema"],
    )
