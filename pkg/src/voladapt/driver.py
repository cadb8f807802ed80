"""Desk-scale orchestration of the two-phase adaptation pipeline.

Phase 1 pairs every source volume with a seeded random target volume and
rewrites it with low-frequency amplitude transfer. Phase 2 runs N
self-training cycles: cycle 1 refines teacher pseudo-labels slice-by-slice
through the proposer, cycles 2..N keep teacher labels untouched and apply the
volume-level retention gate. An external trainer command may be hooked in
after each cycle; without one the run is "trainerless" and teacher
predictions come from a static directory.

All outputs are deterministic for a fixed config and seed: manifests carry
content checksums and root-relative paths, files are written atomically, and
a state file makes interrupted runs resumable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shlex
import shutil
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .curation import (
    CaseReport,
    RefineConfig,
    SelectConfig,
    SliceProposal,
    bbox_of_slice,
    empty_case_report,
    refine_volume,
    select_case,
    summarize_reports,
)
from .fourier import apply_fda
from .metrics import UndefinedMetricError, count_components, dice, hd95
from .proposer import ProposalRequest, ProposerSession
from .schedule import ema_blend, load_pvec, save_pvec
from .volume import Mask3D, SliceMask2D, Volume3D, load_volume, save_volume

# Threshold grids for the selection sweep (midpoints are sensible defaults).
DEFAULT_GRIDS = {
    "tau_conf": [0.5, 0.6, 0.7, 0.8, 0.9],
    "tau_overlap_lo": [0.3, 0.4, 0.5],
    "tau_overlap_hi": [0.6, 0.7, 0.8],
    "tau_cc": [1, 3, 5, 10, 20, 30, 50],
}


class DriverError(RuntimeError):
    pass


@dataclass
class RunConfig:
    source_dir: Path
    target_dir: Path
    out_dir: Path
    predictions_dir: Optional[Path] = None
    gt_dir: Optional[Path] = None
    L: float = 0.02
    cycles: int = 5
    refine: RefineConfig = field(default_factory=lambda: RefineConfig(0.7))
    select: SelectConfig = field(default_factory=lambda: SelectConfig(0.7, 0.4, 0.7, 10))
    proposer_command: List[str] = field(default_factory=list)
    trainer_command: List[str] = field(default_factory=list)
    epochs_hint: int = 1
    ema_alpha: float = 0.99
    seed: int = 0
    use_adapted: bool = True
    resample_pairing_per_epoch: bool = False
    rejected_fallback_to_teacher: bool = False
    workers: int = 1

    def __post_init__(self):
        for name in ("source_dir", "target_dir", "out_dir", "predictions_dir", "gt_dir"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, Path(val))
        if self.cycles < 1:
            raise DriverError("cycles must be >= 1")
        if self.source_dir == self.target_dir:
            raise DriverError("source and target directories must be distinct")
        env_workers = os.environ.get("VOLADAPT_WORKERS")
        if env_workers:
            self.workers = min(self.workers, max(1, int(env_workers)))


def _as_command(value) -> List[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return shlex.split(value)
    return [str(v) for v in value]


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Read a TOML run config; `overrides` (from CLI flags) win key by key."""
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    refine = RefineConfig(float(raw.get("tau_conf_refine", raw.get("tau_conf", 0.7))))
    select = SelectConfig(
        tau_conf=float(raw.get("tau_conf_select", raw.get("tau_conf", 0.7))),
        tau_overlap_lo=float(raw.get("tau_overlap_lo", 0.4)),
        tau_overlap_hi=float(raw.get("tau_overlap_hi", 0.7)),
        tau_cc=int(raw.get("tau_cc", 10)),
        connectivity=int(raw.get("connectivity", 26)),
        clip_masks_to_box=bool(raw.get("clip_masks_to_box", False)),
    )
    return RunConfig(
        source_dir=raw["source_dir"],
        target_dir=raw["target_dir"],
        out_dir=raw["out_dir"],
        predictions_dir=raw.get("predictions_dir"),
        gt_dir=raw.get("gt_dir"),
        L=float(raw.get("L", 0.02)),
        cycles=int(raw.get("cycles", 5)),
        refine=refine,
        select=select,
        proposer_command=_as_command(raw.get("proposer_command")),
        trainer_command=_as_command(raw.get("trainer_command")),
        epochs_hint=int(raw.get("epochs_hint", 1)),
        ema_alpha=float(raw.get("ema_alpha", 0.99)),
        seed=int(raw.get("seed", 0)),
        use_adapted=bool(raw.get("use_adapted", True)),
        resample_pairing_per_epoch=bool(raw.get("resample_pairing_per_epoch", False)),
        rejected_fallback_to_teacher=bool(raw.get("rejected_fallback_to_teacher", False)),
        workers=int(raw.get("workers", 1)),
    )


# ---------------------------------------------------------------------------
# Small deterministic plumbing
# ---------------------------------------------------------------------------

def _derive_seed(root: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{root}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_write_json(path: Path, obj):
    _atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _list_cases(directory: Path) -> List[str]:
    return sorted(p.stem for p in directory.glob("*.vol"))


# ---------------------------------------------------------------------------
# Phase 1: paired low-frequency amplitude transfer
# ---------------------------------------------------------------------------

def phase1_prepare(cfg: RunConfig) -> Path:
    """Translate every source volume against a seeded random target volume.

    Writes adapted volumes under out/phase1/ and a pairing log; returns the
    pairing log path.
    """
    src_images = cfg.source_dir / "images"
    tgt_images = cfg.target_dir / "images"
    sources = _list_cases(src_images)
    targets = _list_cases(tgt_images)
    if not sources:
        raise DriverError(f"no source volumes under {src_images}")
    if not targets:
        raise DriverError(f"no target volumes under {tgt_images}")

    out = cfg.out_dir / "phase1"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(_derive_seed(cfg.seed, "pairing")))
    pairing = {s: targets[int(rng.integers(len(targets)))] for s in sources}

    def translate(case: str):
        x_src = load_volume(src_images / f"{case}.vol")
        x_tgt = load_volume(tgt_images / f"{pairing[case]}.vol")
        adapted = apply_fda(x_src, x_tgt, cfg.L)
        tmp = out / f"{case}.vol.tmp"
        save_volume(adapted, tmp)
        os.replace(tmp, out / f"{case}.vol")

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(translate, sources))
    else:
        for case in sources:
            translate(case)

    log_path = cfg.out_dir / "pairing.json"
    _atomic_write_json(log_path, {"L": cfg.L, "seed": cfg.seed, "pairs": pairing})
    return log_path


# ---------------------------------------------------------------------------
# Phase 2: cycles
# ---------------------------------------------------------------------------

def collect_proposals(session: ProposerSession, case_id: str, teacher: Mask3D,
                      image: Volume3D) -> List[SliceProposal]:
    """One box prompt per nonempty teacher slice, answered by the proposer."""
    if teacher.dims != image.dims:
        raise DriverError(f"teacher/image dims mismatch for {case_id}")
    requests: List[ProposalRequest] = []
    boxes = {}
    for j in range(teacher.dims[0]):
        box = bbox_of_slice(SliceMask2D(teacher.data[j]))
        if box is None:
            continue
        rid = session.new_request_id()
        boxes[rid] = (j, box)
        requests.append(ProposalRequest(rid, case_id, j, box, image.data[j]))
    responses = session.propose_many(requests)
    proposals = []
    for resp in responses:
        j, box = boxes[resp.request_id]
        proposals.append(SliceProposal(j, resp.mask, resp.confidence, box))
    return proposals


def _case_stats(proposals: Sequence[SliceProposal], cfg: SelectConfig) -> Tuple[float, float, int]:
    from .curation import mean_confidence, overlap_ratio, stacked_proposal_mask
    c_bar = mean_confidence(proposals)
    o = overlap_ratio(proposals, clip_to_box=cfg.clip_masks_to_box)
    n = count_components(stacked_proposal_mask(proposals), cfg.connectivity)
    return c_bar, o, n


def _load_state(out_dir: Path) -> dict:
    path = out_dir / "state.json"
    if path.exists():
        return json.loads(path.read_text())
    return {"completed_cycles": []}


def _cycle_complete(out_dir: Path, t: int) -> bool:
    manifest = out_dir / f"cycle_{t}" / "manifest.json"
    if not manifest.exists():
        return False
    rec = json.loads(manifest.read_text())
    for entry in rec["entries"]:
        for kind in ("image", "label"):
            ref = entry[kind]
            if ref["root"] != "out":
                continue
            path = out_dir / ref["name"]
            if not path.exists() or _sha256(path) != entry[f"{kind}_sha256"]:
                return False
    return True


def _resolve(cfg: RunConfig, root: str, name: str) -> Path:
    roots = {
        "source_images": cfg.source_dir / "images",
        "source_labels": cfg.source_dir / "labels",
        "target_images": cfg.target_dir / "images",
        "out": cfg.out_dir,
    }
    return roots[root] / name


def _entry(cfg: RunConfig, case: str, image: Tuple[str, str], label: Tuple[str, str],
           origin: str) -> dict:
    return {
        "case": case,
        "origin": origin,
        "image": {"root": image[0], "name": image[1]},
        "label": {"root": label[0], "name": label[1]},
        "image_sha256": _sha256(_resolve(cfg, *image)),
        "label_sha256": _sha256(_resolve(cfg, *label)),
    }


def _source_entries(cfg: RunConfig) -> List[dict]:
    entries = []
    adapted_dir = cfg.out_dir / "phase1"
    for case in _list_cases(cfg.source_dir / "images"):
        label = cfg.source_dir / "labels" / f"{case}.vol"
        if not label.exists():
            raise DriverError(f"missing source label for {case}")
        if cfg.use_adapted and (adapted_dir / f"{case}.vol").exists():
            image = ("out", f"phase1/{case}.vol")
        else:
            image = ("source_images", f"{case}.vol")
        entries.append(_entry(cfg, case, image, ("source_labels", f"{case}.vol"), "source"))
    return entries


def _write_metrics_csv(cfg: RunConfig, cycle_dir: Path, labels: Dict[str, Path]):
    rows = []
    if cfg.gt_dir is not None:
        for case in sorted(labels):
            gt_path = cfg.gt_dir / f"{case}.vol"
            if not gt_path.exists():
                continue
            gt = load_volume(gt_path)
            pred = load_volume(labels[case])
            d = dice(pred, gt)
            try:
                h = f"{hd95(pred, gt):.6f}"
            except UndefinedMetricError:
                h = ""
            rows.append([case, f"{d:.6f}", h])
    tmp = cycle_dir / "metrics.csv.tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["case", "dice", "hd95_voxels"])
        writer.writerows(rows)
    os.replace(tmp, cycle_dir / "metrics.csv")


def _run_trainer(cfg: RunConfig, t: int, manifest_path: Path, cycle_dir: Path) -> Path:
    """External trainer contract: `trainer <manifest> <outdir> <epochs>` must
    leave checkpoint.pvec and predictions/ under <outdir>."""
    cmd = cfg.trainer_command + [str(manifest_path), str(cycle_dir), str(cfg.epochs_hint)]
    res = subprocess.run(cmd)
    if res.returncode != 0:
        raise DriverError(f"trainer failed in cycle {t} (exit {res.returncode})")
    student_ckpt = cycle_dir / "checkpoint.pvec"
    if not student_ckpt.exists():
        raise DriverError(f"trainer produced no checkpoint in cycle {t}")
    student = load_pvec(student_ckpt)
    prev = cfg.out_dir / f"cycle_{t - 1}" / "teacher.pvec"
    if prev.exists():
        teacher = ema_blend(load_pvec(prev), student, cfg.ema_alpha)
    else:
        teacher = student
    out = cycle_dir / "teacher.pvec"
    save_pvec(teacher, out)
    return cycle_dir / "predictions"


def _predictions_dir(cfg: RunConfig, t: int) -> Path:
    """Teacher predictions feeding cycle t: the last trainer output, or the
    static predictions directory in trainerless mode."""
    if cfg.trainer_command:
        prev = cfg.out_dir / f"cycle_{t - 1}" / "predictions"
        if t > 1 and prev.is_dir():
            return prev
    if cfg.predictions_dir is None:
        raise DriverError("trainerless mode requires predictions_dir")
    return cfg.predictions_dir


def run_cycles(cfg: RunConfig, resume: bool = False,
               stop_after_cycle: Optional[int] = None) -> List[Path]:
    """Run cycles 1..N; returns the list of manifest paths.

    With resume=True, cycles whose manifests validate against their checksums
    are skipped; a corrupted cycle refuses to resume.
    """
    if not cfg.proposer_command:
        raise DriverError("proposer_command is required")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    state = _load_state(cfg.out_dir)
    manifests = []

    for t in range(1, cfg.cycles + 1):
        cycle_dir = cfg.out_dir / f"cycle_{t}"
        manifest_path = cycle_dir / "manifest.json"
        if t in state["completed_cycles"]:
            if not resume:
                raise DriverError(f"cycle {t} already completed; pass resume to continue")
            if not _cycle_complete(cfg.out_dir, t):
                raise DriverError(f"cycle {t} manifest fails checksum validation")
            manifests.append(manifest_path)
            continue

        cycle_dir.mkdir(parents=True, exist_ok=True)
        (cycle_dir / "labels").mkdir(exist_ok=True)
        pred_dir = _predictions_dir(cfg, t)
        tgt_images = cfg.target_dir / "images"
        cases = _list_cases(tgt_images)
        if not cases:
            raise DriverError(f"no target volumes under {tgt_images}")

        entries = _source_entries(cfg)
        reports: List[CaseReport] = []
        written_labels: Dict[str, Path] = {}

        with ProposerSession(cfg.proposer_command) as session:
            for case in cases:
                image = load_volume(tgt_images / f"{case}.vol")
                teacher_path = pred_dir / f"{case}.vol"
                if not teacher_path.exists():
                    raise DriverError(f"missing teacher prediction for {case}")
                teacher = load_volume(teacher_path)
                proposals = collect_proposals(session, case, teacher, image)

                if t == 1:
                    refined = refine_volume(teacher, proposals, cfg.refine)
                    label_rel = f"cycle_{t}/labels/{case}.vol"
                    label_path = cfg.out_dir / label_rel
                    save_volume(refined, label_path)
                    written_labels[case] = label_path
                    entries.append(_entry(cfg, case, ("target_images", f"{case}.vol"),
                                          ("out", label_rel), "target-refined"))
                else:
                    if proposals:
                        report = select_case(case, proposals, cfg.select)
                    else:
                        report = empty_case_report(case)
                    reports.append(report)
                    keep = report.retained or cfg.rejected_fallback_to_teacher
                    if keep:
                        label_rel = f"cycle_{t}/labels/{case}.vol"
                        label_path = cfg.out_dir / label_rel
                        shutil.copyfile(teacher_path, label_path)
                        written_labels[case] = label_path
                        entries.append(_entry(cfg, case, ("target_images", f"{case}.vol"),
                                              ("out", label_rel), "target-selected"))

        summary = summarize_reports(reports)
        lines = [json.dumps(r.to_json(), sort_keys=True) for r in reports]
        lines.append(json.dumps({"summary": summary}, sort_keys=True))
        _atomic_write_text(cycle_dir / "curation.jsonl", "\n".join(lines) + "\n")
        _write_metrics_csv(cfg, cycle_dir, written_labels)

        manifest = {"cycle": t, "entries": entries, "curation_summary": summary}
        _atomic_write_json(manifest_path, manifest)
        manifests.append(manifest_path)

        if cfg.trainer_command:
            _run_trainer(cfg, t, manifest_path, cycle_dir)

        state["completed_cycles"] = sorted(set(state["completed_cycles"]) | {t})
        _atomic_write_json(cfg.out_dir / "state.json", state)

        if stop_after_cycle is not None and t >= stop_after_cycle:
            break

    return manifests


# ---------------------------------------------------------------------------
# Threshold grid sweep
# ---------------------------------------------------------------------------

def grid_sweep(cfg: RunConfig, grids: Optional[dict] = None,
               out_csv: Optional[Path] = None) -> List[dict]:
    """Evaluate every selection threshold combination (honoring lo < hi).

    Per-case statistics are computed once through the proposer; each
    configuration is then a cheap threshold query. The score is the mean
    Dice of retained teacher labels against ground truth when gt_dir is set,
    otherwise the retained fraction.
    """
    grids = dict(DEFAULT_GRIDS, **(grids or {}))
    combos = [
        (tc, lo, hi, cc)
        for tc, lo, hi, cc in product(grids["tau_conf"], grids["tau_overlap_lo"],
                                      grids["tau_overlap_hi"], grids["tau_cc"])
        if lo < hi
    ]
    if not combos:
        raise DriverError("grid is empty after lo < hi filtering")

    pred_dir = _predictions_dir(cfg, 2)
    tgt_images = cfg.target_dir / "images"
    cases = _list_cases(tgt_images)
    stats: Dict[str, Optional[Tuple[float, float, int]]] = {}
    gt_dice: Dict[str, float] = {}
    with ProposerSession(cfg.proposer_command) as session:
        for case in cases:
            image = load_volume(tgt_images / f"{case}.vol")
            teacher = load_volume(pred_dir / f"{case}.vol")
            proposals = collect_proposals(session, case, teacher, image)
            stats[case] = _case_stats(proposals, cfg.select) if proposals else None
            if cfg.gt_dir is not None and (cfg.gt_dir / f"{case}.vol").exists():
                gt_dice[case] = dice(teacher, load_volume(cfg.gt_dir / f"{case}.vol"))

    rows = []
    for tc, lo, hi, cc in combos:
        retained = [
            case for case, s in stats.items()
            if s is not None and s[0] >= tc and lo <= s[1] <= hi and s[2] <= cc
        ]
        if gt_dice:
            score = (sum(gt_dice.get(c, 0.0) for c in retained) / len(retained)
                     if retained else 0.0)
        else:
            score = len(retained) / len(cases) if cases else 0.0
        rows.append({
            "tau_conf": tc, "tau_overlap_lo": lo, "tau_overlap_hi": hi, "tau_cc": cc,
            "retained": len(retained), "rejected": len(cases) - len(retained),
            "score": score,
        })
    rows.sort(key=lambda r: (-r["score"], r["tau_conf"], r["tau_overlap_lo"],
                             r["tau_overlap_hi"], r["tau_cc"]))

    if out_csv is not None:
        tmp = Path(str(out_csv) + ".tmp")
        with open(tmp, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for r in rows:
                writer.writerow({**r, "score": f"{r['score']:.6f}"})
        os.replace(tmp, out_csv)
    return rows
