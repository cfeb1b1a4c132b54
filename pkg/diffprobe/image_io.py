"""Image files: the DPIM1 raw tensor format and portable graymap/pixmap interchange.

DPIM1 layout: magic ``DPIM1``, then little-endian u32 n, H, W, then
n·H·W little-endian f32 values in [0, 1].
"""

import struct
from pathlib import Path
from typing import List

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "ImageFormatError",
    "IMAGE_EXTENSIONS",
    "write_dpim",
    "read_dpim",
    "read_pnm",
    "write_pgm",
    "write_ppm",
    "luminance",
    "resize",
    "load_images",
]

DPIM_MAGIC = b"DPIM1"
IMAGE_EXTENSIONS = [".dpim", ".pgm", ".ppm", ".pnm"]
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class ImageFormatError(Exception):
    """Raised when an image file is empty, truncated or of an unknown format."""

    pass


def write_dpim(path: Path, images: np.ndarray) -> Path:
    """Write an (n, H, W) or (n, 1, H, W) array."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 4:
        images = images[:, 0]
    if images.ndim != 3:
        raise ImageFormatError(f"Expected (n, H, W) images, got shape {images.shape}")
    n, h, w = images.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DPIM_MAGIC)
        f.write(struct.pack("<III", n, h, w))
        f.write(images.astype("<f4").tobytes())
    return path


def read_dpim(path: Path) -> np.ndarray:
    """Read a DPIM1 file into an (n, 1, H, W) float32 array."""
    raw = path.read_bytes()
    if len(raw) == 0:
        raise ImageFormatError(f"{path} is empty")
    if raw[: len(DPIM_MAGIC)] != DPIM_MAGIC or len(raw) < len(DPIM_MAGIC) + 12:
        raise ImageFormatError(f"{path} is not a DPIM1 file")
    n, h, w = struct.unpack_from("<III", raw, len(DPIM_MAGIC))
    data = raw[len(DPIM_MAGIC) + 12 :]
    if len(data) != n * h * w * 4:
        raise ImageFormatError(
            f"{path} is truncated: expected {n * h * w * 4} data bytes, found {len(data)}"
        )
    images = np.frombuffer(data, dtype="<f4").reshape(n, 1, h, w).astype(np.float32)
    if not np.all(np.isfinite(images)):
        raise ImageFormatError(f"{path} contains non-finite pixels")
    return images


def _pnm_header(raw: bytes, count: int):
    """Return the first ``count`` whitespace-separated header tokens and the data offset."""
    tokens: List[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(raw):
            raise ImageFormatError("Truncated PNM header")
        c = raw[i : i + 1]
        if c == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(raw) and not raw[i : i + 1].isspace():
                i += 1
            tokens.append(raw[start:i])
    # exactly one whitespace byte separates the header from binary data
    return tokens, i + 1


def read_pnm(path: Path) -> np.ndarray:
    """Read a P2/P3/P5/P6 file as an (H, W) luminance image in [0, 1]."""
    raw = path.read_bytes()
    if len(raw) == 0:
        raise ImageFormatError(f"{path} is empty")
    try:
        tokens, offset = _pnm_header(raw, 4)
        magic = tokens[0].decode("ascii")
        width, height, maxval = (int(tok) for tok in tokens[1:4])
    except (ValueError, UnicodeDecodeError) as e:
        raise ImageFormatError(f"{path}: malformed PNM header ({e})") from e
    if magic not in ("P2", "P3", "P5", "P6") or maxval <= 0 or maxval > 65535:
        raise ImageFormatError(f"{path}: unsupported PNM variant {magic} (maxval {maxval})")

    channels = 3 if magic in ("P3", "P6") else 1
    count = width * height * channels
    if magic in ("P2", "P3"):
        values = np.array(raw[offset - 1 :].split(), dtype=np.float64)
    else:
        dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
        payload = raw[offset : offset + count * dtype.itemsize]
        usable = len(payload) - len(payload) % dtype.itemsize
        values = np.frombuffer(payload[:usable], dtype=dtype).astype(np.float64)
    if values.size < count:
        raise ImageFormatError(f"{path} is truncated: {values.size} of {count} samples")

    image = values[:count].reshape(height, width, channels) / maxval
    image = luminance(image) if channels == 3 else image[..., 0]
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _to_bytes(image: np.ndarray) -> bytes:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).tobytes()


def write_pgm(path: Path, image: np.ndarray) -> Path:
    """Write an (H, W) image in [0, 1] as binary 8-bit graymap."""
    h, w = image.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _to_bytes(image))
    return path


def write_ppm(path: Path, image: np.ndarray) -> Path:
    """Write an (H, W, 3) image in [0, 1] as binary 8-bit pixmap."""
    h, w, _ = image.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + _to_bytes(image))
    return path


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an (..., 3) array."""
    return rgb @ _LUMA


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Resize an (H, W) image to size×size without padding.

    Area averaging when shrinking, bilinear when enlarging.
    """
    h, w = image.shape
    if (h, w) == (size, size):
        return image.astype(np.float32)
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    if size <= min(h, w):
        out = F.interpolate(x, size=(size, size), mode="area")
    else:
        out = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return out[0, 0].clamp(0.0, 1.0).numpy()


def load_images(path: Path) -> np.ndarray:
    """Load every image stored in ``path`` as (n, H, W); PNM files hold one image."""
    suffix = path.suffix.lower()
    if suffix == ".dpim":
        return read_dpim(path)[:, 0]
    if suffix in (".pgm", ".ppm", ".pnm"):
        return read_pnm(path)[None]
    raise ImageFormatError(f"Unsupported image extension: {path}")
