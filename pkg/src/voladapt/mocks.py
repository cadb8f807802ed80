"""Mock mask proposers speaking MP1 on standard streams.

Run as ``python -m voladapt.mocks <kind> [options]``. These stand in for a
real promptable segmentation model so the whole curation loop is testable at
desk scale. All mocks are bit-deterministic given their configuration: the
noise mock derives an independent RNG stream per (seed, case, slice).

Kinds:
  oracle    answer with the ground-truth slice restricted to the prompt box
  noise     sprinkle pseudo-random foreground inside the prompt box
  constant  fill the prompt box entirely, or return an empty mask
  mixed     oracle behavior for case ids starting with a prefix, noise for
            the rest (lets one session serve mixed populations)
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import Dict, Optional

import click
import numpy as np

from .proposer import PROTO, ProposalRequest, decode_request_line
from .rle import encode_rle
from .volume import Mask3D, SliceMask2D, load_volume


def _emit(rec: dict):
    sys.stdout.write(json.dumps(rec, separators=(",", ":")) + "\n")
    sys.stdout.flush()


def _hello(name: str):
    _emit({"proto": PROTO, "name": name, "caps": ["box_prompt"]})


def _respond(req: ProposalRequest, mask: SliceMask2D, conf: float):
    _emit({"id": req.request_id, "rle": encode_rle(mask), "conf": conf})


def _error(req_id, message: str):
    _emit({"id": req_id, "error": message})


def serve(name: str, answer):
    """Generic MP1 serve loop; `answer` maps a request to (mask, conf)."""
    _hello(name)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            _error(-1, "malformed request line")
            continue
        if rec.get("cmd") == "bye":
            return
        try:
            req = decode_request_line(line)
        except Exception as e:
            _error(rec.get("id", -1), f"bad request: {e}")
            continue
        try:
            mask, conf = answer(req)
            _respond(req, mask, conf)
        except Exception as e:
            _error(req.request_id, str(e))


# ---------------------------------------------------------------------------
# Behaviors
# ---------------------------------------------------------------------------

class GTStore:
    """Lazy ground-truth lookup: one mask file, or a directory of <case>.vol."""

    def __init__(self, gt: Optional[str], gt_dir: Optional[str]):
        if (gt is None) == (gt_dir is None):
            raise click.UsageError("exactly one of --gt / --gt-dir is required")
        self._single = gt
        self._dir = gt_dir
        self._cache: Dict[str, Mask3D] = {}

    def mask_for(self, case_id: str) -> Mask3D:
        key = "" if self._single else case_id
        if key not in self._cache:
            path = Path(self._single) if self._single else Path(self._dir) / f"{case_id}.vol"
            m = load_volume(path)
            if not isinstance(m, Mask3D):
                raise ValueError(f"{path} is not a mask volume")
            self._cache[key] = m
        return self._cache[key]


def oracle_answer(store: GTStore, conf: float):
    def answer(req: ProposalRequest):
        gt = store.mask_for(req.case_id)
        if gt.dims[1:] != req.image.shape:
            raise ValueError(f"GT dims {gt.dims} do not match slice {req.image.shape}")
        if not 0 <= req.slice_index < gt.dims[0]:
            raise ValueError(f"slice {req.slice_index} out of range")
        b = req.bbox
        out = np.zeros(req.image.shape, dtype=np.uint8)
        region = gt.data[req.slice_index, b.row_min:b.row_max + 1, b.col_min:b.col_max + 1]
        out[b.row_min:b.row_max + 1, b.col_min:b.col_max + 1] = region
        return SliceMask2D(out), conf
    return answer


def noise_answer(seed: int, density: float, conf: float):
    def answer(req: ProposalRequest):
        key = f"{seed}:{req.case_id}:{req.slice_index}".encode()
        sub = int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
        rng = np.random.Generator(np.random.PCG64(sub))
        b = req.bbox
        out = np.zeros(req.image.shape, dtype=np.uint8)
        box = rng.random((b.row_max - b.row_min + 1, b.col_max - b.col_min + 1)) < density
        out[b.row_min:b.row_max + 1, b.col_min:b.col_max + 1] = box.astype(np.uint8)
        return SliceMask2D(out), conf
    return answer


def constant_answer(fill: str, conf: float):
    def answer(req: ProposalRequest):
        out = np.zeros(req.image.shape, dtype=np.uint8)
        if fill == "full":
            b = req.bbox
            out[b.row_min:b.row_max + 1, b.col_min:b.col_max + 1] = 1
        return SliceMask2D(out), conf
    return answer


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

@click.group()
def main():
    """Mock MP1 proposers for desk-scale testing."""


@main.command()
@click.option("--gt", type=click.Path(exists=True), default=None,
              help="Single ground-truth mask served for every case.")
@click.option("--gt-dir", type=click.Path(exists=True), default=None,
              help="Directory of <case>.vol ground-truth masks.")
@click.option("--conf", type=float, default=0.95, show_default=True)
def oracle(gt, gt_dir, conf):
    """Answer with ground truth restricted to the prompt box."""
    serve("oracle", oracle_answer(GTStore(gt, gt_dir), conf))


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--density", type=float, default=0.05, show_default=True)
@click.option("--conf", type=float, default=0.5, show_default=True)
def noise(seed, density, conf):
    """Sprinkle pseudo-random foreground inside the prompt box."""
    serve("noise", noise_answer(seed, density, conf))


@main.command()
@click.option("--fill", type=click.Choice(["full", "empty"]), default="full", show_default=True)
@click.option("--conf", type=float, default=0.9, show_default=True)
def constant(fill, conf):
    """Fill the prompt box entirely, or return an empty mask."""
    serve("constant", constant_answer(fill, conf))


@main.command()
@click.option("--gt-dir", type=click.Path(exists=True), required=True)
@click.option("--oracle-prefix", default="oracle", show_default=True,
              help="Case ids starting with this prefix get oracle answers.")
@click.option("--conf-oracle", type=float, default=0.95, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--density", type=float, default=0.05, show_default=True)
@click.option("--conf-noise", type=float, default=0.5, show_default=True)
def mixed(gt_dir, oracle_prefix, conf_oracle, seed, density, conf_noise):
    """Oracle for prefixed case ids, noise for everything else."""
    by_gt = oracle_answer(GTStore(None, gt_dir), conf_oracle)
    by_noise = noise_answer(seed, density, conf_noise)

    def answer(req: ProposalRequest):
        if req.case_id.startswith(oracle_prefix):
            return by_gt(req)
        return by_noise(req)

    serve("mixed", answer)


if __name__ == "__main__":
    main()
