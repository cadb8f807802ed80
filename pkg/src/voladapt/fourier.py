"""3D spectral factorization and low-frequency amplitude transfer.

A volume is carried into a centered complex spectrum (DC bin at the array
center), split into amplitude and phase planes, and low-frequency amplitudes
inside a centered cube are replaced with those of a style-donor volume before
inverse reconstruction. Phase is never touched, which preserves spatial
structure.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .volume import Volume3D

log = logging.getLogger(__name__)

# Cube-size fractions that are known to behave well on MRI-like volumes;
# anything outside just triggers a diagnostic note.
RECOMMENDED_L = (0.01, 0.03)


@dataclass(frozen=True)
class Spectrum3D:
    """Centered complex spectrum stored as amplitude and phase planes."""

    amplitude: np.ndarray  # (D,H,W) float64, >= 0
    phase: np.ndarray      # (D,H,W) float64 in (-pi, pi]
    centered: bool = True

    def __post_init__(self):
        amp = np.asarray(self.amplitude, dtype=np.float64)
        pha = np.asarray(self.phase, dtype=np.float64)
        if amp.shape != pha.shape or amp.ndim != 3:
            raise ValueError(f"amplitude/phase shape mismatch: {amp.shape} vs {pha.shape}")
        if amp.min(initial=0.0) < 0:
            raise ValueError("amplitude must be non-negative")
        amp.flags.writeable = False
        pha.flags.writeable = False
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "phase", pha)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.amplitude.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class FreqCube:
    """Centered cube of half-width b; membership is clamped at array borders."""

    b: int
    dims: Tuple[int, int, int]

    def __post_init__(self):
        if self.b < 0:
            raise ValueError("half-width must be non-negative")

    @property
    def center(self) -> Tuple[int, int, int]:
        return tuple(n // 2 for n in self.dims)  # type: ignore[return-value]

    def ranges(self) -> Tuple[slice, slice, slice]:
        """Clamped index ranges covering the cube along each axis."""
        return tuple(
            slice(max(0, c - self.b), min(n, c + self.b + 1))
            for c, n in zip(self.center, self.dims)
        )  # type: ignore[return-value]

    def contains(self, d: int, h: int, w: int) -> bool:
        cd, ch, cw = self.center
        return abs(d - cd) <= self.b and abs(h - ch) <= self.b and abs(w - cw) <= self.b

    @property
    def member_count(self) -> int:
        return math.prod(r.stop - r.start for r in self.ranges())


def cube_from_L(dims: Tuple[int, int, int], L: float) -> FreqCube:
    """Build the low-frequency cube with half-width floor(L * min(dims))."""
    if not 0.0 < L < 1.0:
        raise ValueError(f"L must lie in (0, 1), got {L}")
    b = int(math.floor(L * min(dims)))
    return FreqCube(b=b, dims=tuple(int(n) for n in dims))


def fft3_centered(v: Volume3D) -> Spectrum3D:
    """Forward 3D FFT with the zero-frequency bin shifted to the array center.

    Arbitrary (non-power-of-two) dims are supported. Phase at exactly-zero
    amplitude bins is defined as 0.
    """
    spec = np.fft.fftshift(np.fft.fftn(v.data.astype(np.float64)))
    amp = np.abs(spec)
    pha = np.angle(spec)
    pha[amp == 0.0] = 0.0
    return Spectrum3D(amplitude=amp, phase=pha, centered=True)


def ifft3_centered(s: Spectrum3D) -> Tuple[Volume3D, float]:
    """Inverse of fft3_centered; returns the real part and the peak imaginary
    residue magnitude (diagnostic only, not an error)."""
    if not s.centered:
        raise ValueError("spectrum must be centered before inverse transform")
    spec = s.amplitude * np.exp(1j * s.phase)
    out = np.fft.ifftn(np.fft.ifftshift(spec))
    resid = float(np.abs(out.imag).max(initial=0.0))
    return Volume3D(out.real.astype(np.float32)), resid


def amplitude_swap(a_src: Spectrum3D, a_tgt: Spectrum3D, cube: FreqCube) -> Spectrum3D:
    """Replace source amplitudes inside the cube with target amplitudes.

    The phase planes of the source are kept bit-identical everywhere.
    """
    if a_src.dims != a_tgt.dims:
        raise ValueError(f"dims mismatch: {a_src.dims} vs {a_tgt.dims}")
    if not (a_src.centered and a_tgt.centered):
        raise ValueError("both spectra must be centered")
    if cube.dims != a_src.dims:
        raise ValueError("cube was built for different dims")
    amp = a_src.amplitude.copy()
    sel = cube.ranges()
    amp[sel] = a_tgt.amplitude[sel]
    return Spectrum3D(amplitude=amp, phase=a_src.phase, centered=True)


def apply_fda(x_src: Volume3D, x_tgt: Volume3D, L: float) -> Volume3D:
    """Transfer low-frequency amplitude statistics of x_tgt into x_src.

    Output is real-valued and deliberately not clamped; downstream
    normalization owns the intensity range.
    """
    if x_src.dims != x_tgt.dims:
        raise ValueError(f"dims mismatch: {x_src.dims} vs {x_tgt.dims}")
    if not RECOMMENDED_L[0] <= L <= RECOMMENDED_L[1]:
        log.info("L=%g is outside the recommended range [%g, %g]",
                 L, RECOMMENDED_L[0], RECOMMENDED_L[1])
    s_src = fft3_centered(x_src)
    s_tgt = fft3_centered(x_tgt)
    cube = cube_from_L(x_src.dims, L)
    fused = amplitude_swap(s_src, s_tgt, cube)
    out, _ = ifft3_centered(fused)
    return Volume3D(out.data, x_src.spacing)
