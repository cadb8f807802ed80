"""Evaluation and curation metrics: Dice, soft Dice loss, HD95, surfaces,
and 3D connected-component labeling.

HD95 here is the pooled symmetric variant: both directed surface-to-surface
distance multisets are merged and the 95th percentile is taken with linear
interpolation between order statistics. Distances are in voxel units unless a
physical spacing is passed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import Mask3D, Volume3D


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. HD95 of an empty mask)."""


def _check_dims(a, b):
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")


def dice(a: Mask3D, b: Mask3D) -> float:
    """2|A∩B| / (|A|+|B|). Both masks empty counts as perfect agreement (1.0)."""
    _check_dims(a, b)
    na = int(a.data.sum())
    nb = int(b.data.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a.data, b.data).sum())
    return 2.0 * inter / (na + nb)


def soft_dice_loss(pred: Volume3D, gt: Mask3D, epsilon: float = 1e-5) -> float:
    """1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps), with p in [0,1]."""
    _check_dims(pred, gt)
    p = pred.data.astype(np.float64)
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("predictions must lie in [0, 1]")
    g = gt.data.astype(np.float64)
    num = 2.0 * float((p * g).sum()) + epsilon
    den = float((p * p).sum()) + float(g.sum()) + epsilon
    return 1.0 - num / den


@dataclass(frozen=True)
class CCLabeling:
    """Component labeling: labels in 1..count, numbered by first-voxel scan order."""

    labels: np.ndarray  # (D,H,W) int32, 0 = background
    count: int
    connectivity: int


_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def label_components(m: Mask3D, connectivity: int = 26) -> CCLabeling:
    """Label maximal connected foreground sets under 6- or 26-connectivity."""
    if connectivity not in _STRUCTS:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    raw, count = ndimage.label(m.data, structure=_STRUCTS[connectivity])
    if count == 0:
        return CCLabeling(np.zeros(m.dims, dtype=np.int32), 0, connectivity)
    # Renumber so component k is the k-th one encountered in scan order,
    # independent of the labeling library's internal order.
    flat = raw.ravel()
    uniq, first = np.unique(flat, return_index=True)
    fg = uniq != 0
    order = uniq[fg][np.argsort(first[fg])]
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order] = np.arange(1, count + 1, dtype=np.int32)
    return CCLabeling(remap[raw], int(count), connectivity)


def count_components(m: Mask3D, connectivity: int = 26) -> int:
    return label_components(m, connectivity).count


def surface_voxels(m: Mask3D) -> np.ndarray:
    """Coordinates (N,3) of foreground voxels with at least one background
    6-neighbor; out-of-bounds counts as background, so border voxels qualify."""
    a = m.data.astype(bool)
    if not a.any():
        return np.empty((0, 3), dtype=np.int64)
    padded = np.pad(a, 1, mode="constant", constant_values=False)
    interior = np.ones_like(a)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    surf = a & ~interior
    return np.argwhere(surf)


def hd95(a: Mask3D, b: Mask3D, spacing: Optional[Tuple[float, float, float]] = None) -> float:
    """95th percentile of pooled symmetric surface-to-surface distances.

    Raises UndefinedMetricError when either mask is empty; never returns a
    sentinel number.
    """
    _check_dims(a, b)
    sa = surface_voxels(a).astype(np.float64)
    sb = surface_voxels(b).astype(np.float64)
    if sa.shape[0] == 0 or sb.shape[0] == 0:
        raise UndefinedMetricError("HD95 undefined for an empty mask")
    if spacing is not None:
        scale = np.asarray(spacing, dtype=np.float64)
        sa = sa * scale
        sb = sb * scale
    d_ab, _ = cKDTree(sb).query(sa, k=1)
    d_ba, _ = cKDTree(sa).query(sb, k=1)
    pooled = np.concatenate([d_ab, d_ba])
    return float(np.percentile(pooled, 95.0, method="linear"))
