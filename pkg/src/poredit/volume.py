"""Binary voxel volumes: signal mapping, file encoding, synthetic generator.

Volumes are numpy uint8 arrays over {0, 1} in (D, H, W) axis order
(0 = solid matrix, 1 = pore), row-major with W fastest. The `.pdtv` format
is 4-byte magic `PDTV`, u8 version, three little-endian u32 dims, then one
byte per voxel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import ndtri

from . import rng

MAGIC = b"PDTV"
VERSION = 1


class VolumeFormatError(ValueError):
    """Malformed .pdtv payload or header."""


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic porous-volume request: thresholded correlated Gaussian field."""

    size: int
    porosity: float
    corr_len: float
    seed: int

    def __post_init__(self):
        if not 0.0 < self.porosity < 1.0:
            raise ValueError(f"porosity must be in (0,1), got {self.porosity}")
        if self.corr_len < 1.0:
            raise ValueError(f"corr_len must be >= 1, got {self.corr_len}")
        if self.corr_len > self.size / 2:
            raise ValueError(f"corr_len {self.corr_len} exceeds half the volume edge {self.size}")


def validate_binary(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"expected a 3-d volume, got shape {v.shape}")
    if not np.isin(v, (0, 1)).all():
        raise ValueError("volume voxels must all be 0 or 1")
    return v.astype(np.uint8)


def map_to_signed(v: np.ndarray) -> np.ndarray:
    """{0,1} pore indicator -> [-1,1] signal: 2*x - 1."""
    return 2.0 * np.asarray(v, dtype=np.float64) - 1.0


def map_to_binary(x: np.ndarray) -> np.ndarray:
    """Inverse of map_to_signed on exactly-binary signals."""
    return ((np.asarray(x) + 1.0) / 2.0).round().astype(np.uint8)


def porosity(v: np.ndarray) -> float:
    return float(np.asarray(v, dtype=np.float64).mean())


def write_volume(v: np.ndarray, path) -> None:
    v = validate_binary(v)
    d, h, w = v.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        f.write(struct.pack("<III", d, h, w))
        f.write(v.tobytes(order="C"))


def read_volume(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 17:
        raise VolumeFormatError(f"{path}: truncated header")
    if blob[:4] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {blob[:4]!r}")
    version = blob[4]
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    d, h, w = struct.unpack("<III", blob[5:17])
    payload = blob[17:]
    if len(payload) != d * h * w:
        raise VolumeFormatError(f"{path}: truncated payload, expected {d * h * w} bytes, got {len(payload)}")
    v = np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w)
    if not np.isin(v, (0, 1)).all():
        raise VolumeFormatError(f"{path}: payload contains non-{{0,1}} bytes")
    return v.copy()


def synth_grf(spec: SynthSpec) -> np.ndarray:
    """White noise smoothed by a separable Gaussian (std = corr_len,
    reflective boundaries), standardized and thresholded at the fixed
    Gaussian level for the requested porosity. The realized porosity
    fluctuates around the target like replicate material samples do
    (std ~1% at 64^3 with corr_len 3), which keeps ensemble statistics
    non-degenerate."""
    gen = rng.stream(spec.seed, "synth-grf")
    field = gen.standard_normal((spec.size,) * 3)
    field = gaussian_filter(field, sigma=spec.corr_len, mode="reflect")
    field = (field - field.mean()) / field.std()
    level = ndtri(1.0 - spec.porosity)  # pore = field above the level
    return (field >= level).astype(np.uint8)
