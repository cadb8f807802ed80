"""Run-length codec for binary 2D masks.

Runs are row-major and alternate background/foreground, always starting with
background (a leading zero run encodes a mask that begins with foreground).
The run sum must equal H*W.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .volume import SliceMask2D


class RLEError(ValueError):
    pass


def encode_rle(mask: SliceMask2D) -> List[int]:
    flat = mask.data.ravel()
    n = flat.size
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [n]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode_rle(runs: Sequence[int], h: int, w: int) -> SliceMask2D:
    runs = [int(r) for r in runs]
    if any(r < 0 for r in runs):
        raise RLEError("negative run length")
    total = sum(runs)
    if total != h * w:
        raise RLEError(f"runs sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for r in runs:
        if value:
            flat[pos:pos + r] = 1
        pos += r
        value ^= 1
    return SliceMask2D(flat.reshape(h, w))
