"""MP1 serve loop wrapping a box-promptable mask model.

The bridge reads newline-delimited JSON requests on stdin and answers on
stdout, one inference in flight at a time. The host side gets parallelism by
spawning several bridge processes, not by threading inside one.

Wire format (MP1):
  hello     {"proto": "MP1", "name": ..., "variant": ..., "caps": ["box_prompt"]}
  request   {"id", "case", "slice", "bbox": [r0, r1, c0, c1], "h", "w", "img_b64"}
            where img_b64 is the base64 of little-endian float32 row-major
            slice intensities.
  response  {"id", "rle": [...], "conf"}       rle sums to h*w
  error     {"id", "error": "..."}             session stays alive
  shutdown  {"cmd": "bye"}
"""

from __future__ import annotations

import base64
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

PROTO = "MP1"
VARIANTS = ("vit_b", "vit_l", "vit_h")


class BridgeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BridgeConfig:
    """Checkpoint path, model variant, and inference device.

    checkpoint may be None only in stub mode (a deterministic fake model used
    by the protocol conformance tests).
    """

    checkpoint: Optional[Path]
    variant: str = "vit_b"
    device: str = "cpu"
    stub: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise BridgeConfigError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.stub:
            return
        if self.checkpoint is None:
            raise BridgeConfigError("a checkpoint path is required outside stub mode")
        if not Path(self.checkpoint).exists():
            raise BridgeConfigError(f"checkpoint not found: {self.checkpoint}")


def slice_to_rgb8(intensities: np.ndarray) -> np.ndarray:
    """Per-slice min-max scale to 8-bit and replicate to three channels.

    The model wants HxWx3 uint8; volumetric grayscale has no canonical RGB
    mapping, so the plain min-max choice lives here and nowhere else. A
    constant slice maps to all zeros.
    """
    lo = float(intensities.min())
    hi = float(intensities.max())
    if hi > lo:
        scaled = (intensities - lo) * (255.0 / (hi - lo))
    else:
        scaled = np.zeros_like(intensities)
    gray = scaled.astype(np.uint8)
    return np.stack([gray, gray, gray], axis=-1)


def encode_rle(mask: np.ndarray) -> List[int]:
    """Row-major run lengths alternating background/foreground, background first."""
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    if flat.size == 0:
        return []
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return [int(r) for r in runs]


class StubModel:
    """Deterministic stand-in: fills the prompt box, confidence from content.

    Exists so the wire protocol can be exercised end to end on machines with
    no GPU, no torch, and no checkpoint.
    """

    def predict(self, image: np.ndarray, box: np.ndarray):
        h, w = image.shape[:2]
        r0, c0, r1, c1 = int(box[1]), int(box[0]), int(box[3]), int(box[2])
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[r0:r1 + 1, c0:c1 + 1] = 1
        # Pseudo predicted-IoU: mean box brightness, deliberately may exceed
        # the unit interval before clamping downstream.
        conf = float(image[r0:r1 + 1, c0:c1 + 1].mean()) / 200.0
        return mask, conf


class SamModel:
    """Thin wrapper over segment-anything's box-prompt predictor."""

    def __init__(self, cfg: BridgeConfig):
        from segment_anything import SamPredictor, sam_model_registry

        sam = sam_model_registry[cfg.variant](checkpoint=str(cfg.checkpoint))
        sam.to(cfg.device)
        self._predictor = SamPredictor(sam)

    def predict(self, image: np.ndarray, box: np.ndarray):
        self._predictor.set_image(slice_to_rgb8(image))
        masks, scores, _ = self._predictor.predict(
            box=box[None, :], multimask_output=True)
        best = int(np.argmax(scores))
        return masks[best].astype(np.uint8), float(scores[best])


def load_model(cfg: BridgeConfig):
    if cfg.stub:
        return StubModel()
    return SamModel(cfg)


def _decode_request(rec: dict):
    rid = rec["id"]
    h = int(rec["h"])
    w = int(rec["w"])
    if h <= 0 or w <= 0:
        raise ValueError("non-positive slice dims")
    raw = base64.b64decode(rec["img_b64"], validate=True)
    image = np.frombuffer(raw, dtype="<f4")
    if image.size != h * w:
        raise ValueError(f"payload holds {image.size} floats, expected {h * w}")
    image = image.reshape(h, w)
    r0, r1, c0, c1 = (int(v) for v in rec["bbox"])
    if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
        raise ValueError(f"bbox {rec['bbox']} outside {h}x{w} slice")
    # Model convention is xyxy = (c0, r0, c1, r1).
    box = np.array([c0, r0, c1, r1], dtype=np.int64)
    return rid, image, box


def serve(cfg: BridgeConfig, stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout

    def emit(rec: dict):
        stdout.write(json.dumps(rec, separators=(",", ":")) + "\n")
        stdout.flush()

    try:
        model = load_model(cfg)
    except Exception as e:
        emit({"proto": PROTO, "name": "sam-bridge", "error": f"model load failed: {e}"})
        return 1

    emit({"proto": PROTO, "name": "sam-bridge", "variant": cfg.variant,
          "device": cfg.device, "stub": cfg.stub, "caps": ["box_prompt"]})

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            emit({"id": -1, "error": "malformed request line"})
            continue
        if rec.get("cmd") == "bye":
            return 0
        try:
            rid, image, box = _decode_request(rec)
        except Exception as e:
            emit({"id": rec.get("id", -1), "error": f"bad request: {e}"})
            continue
        try:
            mask, conf = model.predict(image, box)
            conf = min(1.0, max(0.0, conf))
            emit({"id": rid, "rle": encode_rle(mask), "conf": conf})
        except Exception as e:
            emit({"id": rid, "error": str(e)})
    return 0


def device_from_env(default: str = "cpu") -> str:
    return os.environ.get("SAM_BRIDGE_DEVICE", default)
