"""Volumetric data types, VOL1 binary I/O, and intensity preprocessing.

All types are immutable after construction (arrays are marked read-only) and
every operation here is a pure function, so everything is safe to share across
threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

MAGIC = b"VOL1"
DTYPE_F32 = 0
DTYPE_U8 = 1

_HEADER = struct.Struct("<4sB3I3f")

# Largest voxel count we are willing to allocate for (16 GiB of f32).
_MAX_VOXELS = 1 << 32


class VolumeError(ValueError):
    """Base class for volume construction and I/O failures."""

    code = "volume_error"


class BadMagicError(VolumeError):
    code = "bad_magic"


class BadHeaderError(VolumeError):
    code = "bad_header"


class DimsOverflowError(VolumeError):
    code = "dims_overflow"


class TruncatedPayloadError(VolumeError):
    code = "truncated_payload"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Volume3D:
    """Dense scalar field of shape (D, H, W), float32, row-major (w fastest)."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 3:
            raise VolumeError(f"expected 3D array, got shape {a.shape}")
        if min(a.shape) < 1:
            raise VolumeError(f"dims must be positive, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise VolumeError("volume contains NaN/Inf")
        object.__setattr__(self, "data", _freeze(a))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class Mask3D:
    """Binary label field of shape (D, H, W), values in {0, 1}."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.uint8)
        if a.ndim != 3:
            raise VolumeError(f"expected 3D array, got shape {a.shape}")
        if min(a.shape) < 1:
            raise VolumeError(f"dims must be positive, got {a.shape}")
        if a.max(initial=0) > 1:
            raise VolumeError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _freeze(a))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class SliceMask2D:
    """Binary 2D slice of shape (H, W), values in {0, 1}."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.uint8)
        if a.ndim != 2:
            raise VolumeError(f"expected 2D array, got shape {a.shape}")
        if min(a.shape) < 1:
            raise VolumeError(f"dims must be positive, got {a.shape}")
        if a.max(initial=0) > 1:
            raise VolumeError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _freeze(a))

    @property
    def dims(self) -> Tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class BBox2D:
    """Inclusive axis-aligned pixel box: rows [row_min, row_max], cols [col_min, col_max]."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if not (0 <= self.row_min <= self.row_max and 0 <= self.col_min <= self.col_max):
            raise VolumeError(f"degenerate bbox {self}")

    @property
    def pixel_count(self) -> int:
        return (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)

    def as_list(self) -> list:
        return [self.row_min, self.row_max, self.col_min, self.col_max]


# ---------------------------------------------------------------------------
# VOL1 binary format
# ---------------------------------------------------------------------------

def save_volume(v: Union[Volume3D, Mask3D], path: Union[str, Path]) -> None:
    """Write a Volume3D or Mask3D in VOL1 format (little-endian)."""
    if isinstance(v, Volume3D):
        dtype_code, payload = DTYPE_F32, v.data.astype("<f4").tobytes()
    elif isinstance(v, Mask3D):
        dtype_code, payload = DTYPE_U8, v.data.astype(np.uint8).tobytes()
    else:
        raise VolumeError(f"cannot save object of type {type(v).__name__}")
    d, h, w = v.dims
    header = _HEADER.pack(MAGIC, dtype_code, d, h, w, *v.spacing)
    Path(path).write_bytes(header + payload)


def load_volume(path: Union[str, Path]) -> Union[Volume3D, Mask3D]:
    """Read a VOL1 file; returns Volume3D for f32 payloads, Mask3D for u8."""
    raw = Path(path).read_bytes()
    return parse_vol1(raw)


def parse_vol1(raw: bytes) -> Union[Volume3D, Mask3D]:
    if len(raw) < _HEADER.size:
        raise BadHeaderError(f"file too short for header ({len(raw)} bytes)")
    magic, dtype_code, d, h, w, sd, sh, sw = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if dtype_code not in (DTYPE_F32, DTYPE_U8):
        raise BadHeaderError(f"unknown dtype code {dtype_code}")
    if min(d, h, w) < 1:
        raise BadHeaderError(f"non-positive dims ({d}, {h}, {w})")
    count = d * h * w
    if count > _MAX_VOXELS:
        raise DimsOverflowError(f"dims ({d}, {h}, {w}) exceed supported size")
    itemsize = 4 if dtype_code == DTYPE_F32 else 1
    expected = _HEADER.size + count * itemsize
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(raw) - _HEADER.size} bytes, expected {count * itemsize}"
        )
    if len(raw) > expected:
        raise BadHeaderError(f"trailing bytes after payload ({len(raw) - expected})")
    body = raw[_HEADER.size:]
    spacing = (sd, sh, sw)
    if dtype_code == DTYPE_F32:
        a = np.frombuffer(body, dtype="<f4").reshape(d, h, w)
        return Volume3D(a, spacing)
    a = np.frombuffer(body, dtype=np.uint8).reshape(d, h, w)
    return Mask3D(a, spacing)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def minmax_normalize(v: Volume3D) -> Volume3D:
    """Rescale intensities to [0, 1]; a constant volume maps to all zeros."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        return Volume3D(np.zeros(v.dims, dtype=np.float32), v.spacing)
    out = (v.data - lo) / np.float32(hi - lo)
    return Volume3D(out, v.spacing)


def crop_to_nonzero_then_fit(v: Volume3D, target: Tuple[int, int, int]) -> Volume3D:
    """Tight-crop to the nonzero region, then center-crop/zero-pad to `target`.

    Centering ties break toward lower indices. An all-zero input yields a zero
    volume of the target shape.
    """
    if min(target) < 1:
        raise VolumeError(f"target dims must be positive, got {target}")
    nz = np.nonzero(v.data)
    if nz[0].size == 0:
        return Volume3D(np.zeros(target, dtype=np.float32), v.spacing)
    lo = [int(idx.min()) for idx in nz]
    hi = [int(idx.max()) + 1 for idx in nz]
    region = v.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    out = np.zeros(target, dtype=np.float32)
    src_sel, dst_sel = [], []
    for axis in range(3):
        size, tgt = region.shape[axis], target[axis]
        if size >= tgt:
            start = (size - tgt) // 2
            src_sel.append(slice(start, start + tgt))
            dst_sel.append(slice(0, tgt))
        else:
            pad_lo = (tgt - size) // 2
            src_sel.append(slice(0, size))
            dst_sel.append(slice(pad_lo, pad_lo + size))
    out[tuple(dst_sel)] = region[tuple(src_sel)]
    return Volume3D(out, v.spacing)


# ---------------------------------------------------------------------------
# Slice access
# ---------------------------------------------------------------------------

def extract_slice(m: Mask3D, j: int) -> SliceMask2D:
    d = m.dims[0]
    if not 0 <= j < d:
        raise IndexError(f"slice index {j} out of range for depth {d}")
    return SliceMask2D(m.data[j])


def stack_slices(slices: Sequence[SliceMask2D],
                 spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Mask3D:
    if not slices:
        raise VolumeError("cannot stack zero slices")
    hw = slices[0].dims
    for s in slices:
        if s.dims != hw:
            raise VolumeError(f"inconsistent slice dims {s.dims} vs {hw}")
    return Mask3D(np.stack([s.data for s in slices], axis=0), spacing)
