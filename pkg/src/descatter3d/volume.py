"""Voxel-grid volumes with physical metadata, resampling, normalization and .dvol I/O.

Arrays are indexed ``data[x, y, z]``. On disk the payload is written x-fastest
(Fortran order), which is what the ``.dvol`` layout prescribes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateVolume, FormatError, InvalidDims

MAGIC = b"DVOL"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sH3I3ffH4x")
HEADER_SIZE = _HEADER.size  # 40


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    pitch: tuple[float, float, float] = (1.0, 1.0, 1.0)
    depth_offset: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidDims(f"volume data must be 3D with all dims >= 1, got {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        if data.size and data.min() < 0:
            raise ValueError("volume contains negative values")
        pitch = tuple(float(p) for p in self.pitch)
        if len(pitch) != 3 or min(pitch) <= 0:
            raise ValueError(f"pitch must be three positive values, got {self.pitch}")
        if self.depth_offset < 0:
            raise ValueError("depth_offset must be >= 0")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pitch", pitch)
        object.__setattr__(self, "depth_offset", float(self.depth_offset))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent(self) -> tuple[float, float, float]:
        """Physical span between the first and last voxel centres (um)."""
        return tuple((n - 1) * p for n, p in zip(self.dims, self.pitch))

    def plane_depth(self, k: int) -> float:
        return self.depth_offset + k * self.pitch[2]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.pitch, self.depth_offset)

    def equals(self, other: "Volume") -> bool:
        """Bit-exact comparison of data and metadata."""
        return (
            self.dims == other.dims
            and self.pitch == other.pitch
            and self.depth_offset == other.depth_offset
            and self.data.tobytes() == other.data.tobytes()
        )


def _resample_axis(a: np.ndarray, axis: int, n_new: int) -> np.ndarray:
    n_old = a.shape[axis]
    if n_new == n_old:
        return a
    if n_old == 1:
        return np.repeat(a, n_new, axis=axis)
    if n_new == 1:
        coords = np.array([(n_old - 1) / 2.0])
    else:
        coords = np.arange(n_new, dtype=np.float64) * ((n_old - 1) / (n_new - 1))
    lo = np.clip(np.floor(coords).astype(np.int64), 0, n_old - 1)
    hi = np.minimum(lo + 1, n_old - 1)
    w = coords - lo
    shape = [1] * a.ndim
    shape[axis] = n_new
    w = w.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - w) + np.take(a, hi, axis=axis) * w


def resampled_pitch(old_dims, old_pitch, new_dims) -> tuple[float, float, float]:
    """Corner-aligned pitch: keeps (n - 1) * pitch fixed on every axis with n > 1."""
    out = []
    for n_old, p, n_new in zip(old_dims, old_pitch, new_dims):
        if n_new == n_old:
            out.append(p)
        elif n_old > 1 and n_new > 1:
            out.append(p * (n_old - 1) / (n_new - 1))
        else:
            out.append(p * n_old / n_new)
    return tuple(out)


def trilinear_resample(vol: Volume, new_dims) -> Volume:
    """Resample with corner-aligned trilinear interpolation and edge clamping."""
    new_dims = tuple(int(n) for n in new_dims)
    if len(new_dims) != 3 or min(new_dims) < 1:
        raise InvalidDims(f"target dims must be three values >= 1, got {new_dims}")
    if new_dims == vol.dims:
        return Volume(vol.data.copy(), vol.pitch, vol.depth_offset)
    a = vol.data.astype(np.float64)
    for axis in range(3):
        a = _resample_axis(a, axis, new_dims[axis])
    # convex combinations can still overshoot by an ulp
    a = np.clip(a, float(vol.data.min()), float(vol.data.max()))
    return Volume(a.astype(np.float32), resampled_pitch(vol.dims, vol.pitch, new_dims), vol.depth_offset)


def positive_percentile(data: np.ndarray, percentile: float) -> float:
    pos = data[data > 0].astype(np.float64)
    if pos.size == 0:
        raise DegenerateVolume("volume has no positive voxels")
    return float(np.percentile(pos, percentile))


def normalize_volume(vol: Volume, percentile: float = 99.9) -> tuple[Volume, float]:
    """Divide by the given percentile of positive voxels and clamp to [0, 2].

    Returns the normalized volume and the scale that was divided out.
    """
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    scale = positive_percentile(vol.data, percentile)
    out = np.clip(vol.data.astype(np.float64) / scale, 0.0, 2.0)
    return vol.with_data(out.astype(np.float32)), scale


def save_volume(vol: Volume, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, *vol.dims, *vol.pitch, vol.depth_offset, DTYPE_F32)
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, nx, ny, nz, px, py, pz, depth, dtype = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    n = nx * ny * nz
    if len(raw) - HEADER_SIZE < 4 * n:
        raise FormatError(f"{path}: payload truncated ({len(raw) - HEADER_SIZE} < {4 * n} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=HEADER_SIZE)
    data = data.reshape((nx, ny, nz), order="F").astype(np.float32)
    return Volume(np.ascontiguousarray(data), (px, py, pz), depth)
