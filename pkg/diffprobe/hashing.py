"""Content hashes and derived random streams.

Every random consumer draws from a stream keyed by (master seed, stage,
item...), so results never depend on call order or worker count.
"""

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch

__all__ = [
    "file_sha256",
    "content_sha256",
    "derive_seed",
    "derived_rng",
    "derived_generator",
]

_CHUNK = 1 << 20


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(_CHUNK):
            digest.update(chunk)
    return digest.hexdigest()


def content_sha256(value: Any) -> str:
    """Hash of a JSON-serializable value with sorted keys."""
    payload = json.dumps(value, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def derive_seed(seed: int, *keys: Any) -> int:
    key = ":".join(str(k) for k in (seed, *keys)).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def derived_rng(seed: int, *keys: Any) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def derived_generator(seed: int, *keys: Any) -> torch.Generator:
    # torch seeds must fit in a signed 64-bit integer
    return torch.Generator().manual_seed(derive_seed(seed, *keys) >> 1)
