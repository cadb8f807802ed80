"""Pseudo-label curation: box prompt extraction, confidence-gated slice
refinement (first self-training cycle), and the three-criterion volume
retention predicate (later cycles).

Slices whose teacher mask is empty produce no prompt and pass through
refinement untouched. All three retention thresholds are boundary-inclusive:
mean confidence >= tau_conf, overlap ratio inside the closed interval
[tau_overlap_lo, tau_overlap_hi], and component count <= tau_cc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from .metrics import count_components
from .volume import BBox2D, Mask3D, SliceMask2D, stack_slices


class EmptyCaseError(ValueError):
    """No prompted slices at all; curation statistics are undefined."""


@dataclass(frozen=True)
class SliceProposal:
    """One proposer answer: refined slice mask plus its confidence and the
    bounding-box prompt that produced it."""

    slice_index: int
    mask: SliceMask2D
    confidence: float
    bbox: BBox2D

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class RefineConfig:
    tau_conf: float

    def __post_init__(self):
        if not 0.0 < self.tau_conf < 1.0:
            raise ValueError(f"tau_conf must lie in (0, 1), got {self.tau_conf}")


@dataclass(frozen=True)
class SelectConfig:
    tau_conf: float
    tau_overlap_lo: float
    tau_overlap_hi: float
    tau_cc: int
    connectivity: int = 26
    clip_masks_to_box: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau_overlap_lo < self.tau_overlap_hi <= 1.0:
            raise ValueError(
                f"need 0 <= lo < hi <= 1, got [{self.tau_overlap_lo}, {self.tau_overlap_hi}]"
            )
        if self.tau_cc < 1:
            raise ValueError(f"tau_cc must be >= 1, got {self.tau_cc}")
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")


@dataclass(frozen=True)
class CaseReport:
    """Per-volume curation verdict. `retained` is always the conjunction of
    the three pass flags; `reason` names the first failed criterion."""

    case_id: str
    slice_count: int
    mean_conf: float
    overlap_ratio: float
    cc_count: int
    conf_pass: bool
    overlap_pass: bool
    cc_pass: bool
    retained: bool
    reason: str  # "retained" | "conf" | "overlap" | "cc" | "empty"

    def __post_init__(self):
        if self.reason != "empty" and self.retained != (
            self.conf_pass and self.overlap_pass and self.cc_pass
        ):
            raise ValueError("retained flag inconsistent with pass flags")

    def to_json(self) -> Dict:
        return asdict(self)


def bbox_of_slice(s: SliceMask2D) -> Optional[BBox2D]:
    """Tightest box around foreground pixels; None for an empty slice."""
    rows = np.any(s.data, axis=1)
    if not rows.any():
        return None
    cols = np.any(s.data, axis=0)
    r = np.flatnonzero(rows)
    c = np.flatnonzero(cols)
    return BBox2D(int(r[0]), int(r[-1]), int(c[0]), int(c[-1]))


def _sorted_unique(proposals: Sequence[SliceProposal], depth: Optional[int] = None
                   ) -> List[SliceProposal]:
    seen = set()
    for p in proposals:
        if p.slice_index in seen:
            raise ValueError(f"duplicate proposal for slice {p.slice_index}")
        if depth is not None and not 0 <= p.slice_index < depth:
            raise IndexError(f"slice index {p.slice_index} out of range for depth {depth}")
        seen.add(p.slice_index)
    return sorted(proposals, key=lambda p: p.slice_index)


def refine_volume(y0: Mask3D, proposals: Sequence[SliceProposal], cfg: RefineConfig) -> Mask3D:
    """Replace slice j of y0 by the proposal mask when its confidence clears
    tau_conf (boundary inclusive); everything else keeps the teacher slice."""
    d, h, w = y0.dims
    out = y0.data.copy()
    for p in _sorted_unique(proposals, depth=d):
        if p.mask.dims != (h, w):
            raise ValueError(f"proposal slice dims {p.mask.dims} != volume ({h}, {w})")
        if p.confidence >= cfg.tau_conf:
            out[p.slice_index] = p.mask.data
    return Mask3D(out, y0.spacing)


def mean_confidence(proposals: Sequence[SliceProposal]) -> float:
    if not proposals:
        raise EmptyCaseError("no prompted slices")
    return math.fsum(p.confidence for p in proposals) / len(proposals)


def overlap_ratio(proposals: Sequence[SliceProposal], clip_to_box: bool = False) -> float:
    """Total proposal foreground over total box pixels across prompted slices.

    Foreground outside the prompt box still counts unless clip_to_box is set.
    """
    if not proposals:
        raise EmptyCaseError("no prompted slices")
    fg = 0
    box = 0
    for p in _sorted_unique(proposals):
        if clip_to_box:
            b = p.bbox
            region = p.mask.data[b.row_min:b.row_max + 1, b.col_min:b.col_max + 1]
            fg += int(region.sum())
        else:
            fg += int(p.mask.data.sum())
        box += p.bbox.pixel_count
    return fg / box


def stacked_proposal_mask(proposals: Sequence[SliceProposal]) -> Mask3D:
    """Proposal slices stacked contiguously in increasing slice order."""
    ordered = _sorted_unique(proposals)
    return stack_slices([p.mask for p in ordered])


def select_case(case_id: str, proposals: Sequence[SliceProposal], cfg: SelectConfig) -> CaseReport:
    """Evaluate the three retention criteria; the teacher pseudo-labels
    themselves are never modified here."""
    if not proposals:
        raise EmptyCaseError("no prompted slices")
    c_bar = mean_confidence(proposals)
    o = overlap_ratio(proposals, clip_to_box=cfg.clip_masks_to_box)
    n = count_components(stacked_proposal_mask(proposals), cfg.connectivity)
    conf_pass = c_bar >= cfg.tau_conf
    overlap_pass = cfg.tau_overlap_lo <= o <= cfg.tau_overlap_hi
    cc_pass = n <= cfg.tau_cc
    retained = conf_pass and overlap_pass and cc_pass
    if retained:
        reason = "retained"
    elif not conf_pass:
        reason = "conf"
    elif not overlap_pass:
        reason = "overlap"
    else:
        reason = "cc"
    return CaseReport(
        case_id=case_id,
        slice_count=len(proposals),
        mean_conf=c_bar,
        overlap_ratio=o,
        cc_count=n,
        conf_pass=conf_pass,
        overlap_pass=overlap_pass,
        cc_pass=cc_pass,
        retained=retained,
        reason=reason,
    )


def empty_case_report(case_id: str) -> CaseReport:
    """Automatic rejection for a volume with no prompted slices, kept distinct
    from threshold rejections so statistics can tell the two apart."""
    return CaseReport(
        case_id=case_id,
        slice_count=0,
        mean_conf=0.0,
        overlap_ratio=0.0,
        cc_count=0,
        conf_pass=False,
        overlap_pass=False,
        cc_pass=False,
        retained=False,
        reason="empty",
    )


def summarize_reports(reports: Sequence[CaseReport]) -> Dict[str, int]:
    summary = {
        "retained": 0,
        "rejected_by_conf": 0,
        "rejected_by_overlap": 0,
        "rejected_by_cc": 0,
        "rejected_empty": 0,
    }
    keys = {"retained": "retained", "conf": "rejected_by_conf",
            "overlap": "rejected_by_overlap", "cc": "rejected_by_cc",
            "empty": "rejected_empty"}
    for r in reports:
        summary[keys[r.reason]] += 1
    return summary
