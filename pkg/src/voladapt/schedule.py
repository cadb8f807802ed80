"""Adversarial-weight ramp schedule and EMA blending of flat parameter vectors.

The gradient-reversal scaling itself lives in whatever external trainer is
attached; this module only evaluates the ramp and blends checkpoints.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

PVEC_MAGIC = b"PVEC"


@dataclass(frozen=True)
class LambdaSchedule:
    """Logistic ramp: 0 during warm-up, lambda_max/(1+exp(-gamma(t-t0))) after,
    pinned to lambda_max from freeze_after onward."""

    lambda_max: float
    gamma: float
    t0: float
    warmup_epochs: int = 0
    freeze_after: Optional[float] = None

    def __post_init__(self):
        if self.lambda_max <= 0:
            raise ValueError("lambda_max must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.freeze_after is None:
            # Logistic is within 0.7% of the ceiling at t0 + 5/gamma.
            object.__setattr__(self, "freeze_after", self.t0 + 5.0 / self.gamma)


def lambda_at(s: LambdaSchedule, t: float) -> float:
    if t < s.warmup_epochs:
        return 0.0
    if t >= s.freeze_after:
        return s.lambda_max
    return s.lambda_max / (1.0 + math.exp(-s.gamma * (t - s.t0)))


@dataclass(frozen=True)
class ParamVector:
    """Flat float32 parameter vector with an opaque shape tag.

    The toolkit never interprets model structure; the tag exists so two
    vectors from incompatible checkpoints refuse to blend.
    """

    values: np.ndarray
    tag: str = ""

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float32).ravel()
        if not np.all(np.isfinite(a)):
            raise ValueError("parameter vector contains NaN/Inf")
        a.flags.writeable = False
        object.__setattr__(self, "values", a)


def ema_blend(teacher: ParamVector, student: ParamVector, alpha: float) -> ParamVector:
    """Elementwise alpha*teacher + (1-alpha)*student in float32."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if teacher.tag != student.tag:
        raise ValueError(f"tag mismatch: {teacher.tag!r} vs {student.tag!r}")
    if teacher.values.shape != student.values.shape:
        raise ValueError("parameter vector length mismatch")
    a = np.float32(alpha)
    out = a * teacher.values + (np.float32(1.0) - a) * student.values
    return ParamVector(out, teacher.tag)


def save_pvec(p: ParamVector, path: Union[str, Path]) -> None:
    tag = p.tag.encode("utf-8")
    header = PVEC_MAGIC + struct.pack("<I", len(tag)) + tag + struct.pack("<Q", p.values.size)
    Path(path).write_bytes(header + p.values.astype("<f4").tobytes())


def load_pvec(path: Union[str, Path]) -> ParamVector:
    raw = Path(path).read_bytes()
    if raw[:4] != PVEC_MAGIC:
        raise ValueError(f"bad magic {raw[:4]!r}")
    (tag_len,) = struct.unpack_from("<I", raw, 4)
    tag = raw[8:8 + tag_len].decode("utf-8")
    (count,) = struct.unpack_from("<Q", raw, 8 + tag_len)
    body = raw[16 + tag_len:]
    if len(body) != count * 4:
        raise ValueError(f"payload has {len(body)} bytes, expected {count * 4}")
    return ParamVector(np.frombuffer(body, dtype="<f4"), tag)
