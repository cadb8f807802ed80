"""Command-line entry points.

Each module gets its own executable (`vol`, `fda`, `schedule`, `ema`,
`metrics`, `curate`, `selftrain`); the proposals JSONL consumed by `curate`
stores one record per slice proposal:
``{"case","slice","bbox":[r0,r1,c0,c1],"h","w","rle":[...],"conf"}``.
"""

from __future__ import annotations

import json
import sys
from collections import defaultdict
from pathlib import Path

import click
import numpy as np

from . import curation, driver, fourier, metrics as metrics_mod, schedule as sched_mod
from .rle import decode_rle
from .volume import (
    BBox2D,
    Mask3D,
    Volume3D,
    crop_to_nonzero_then_fit,
    load_volume,
    minmax_normalize,
    save_volume,
)


def _load_typed(path, want):
    v = load_volume(path)
    if not isinstance(v, want):
        raise click.ClickException(f"{path} is not a {want.__name__}")
    return v


# ---------------------------------------------------------------------------
# vol
# ---------------------------------------------------------------------------

@click.group()
def vol():
    """Inspect and preprocess VOL1 volumes."""


@vol.command("info")
@click.argument("path", type=click.Path(exists=True))
def vol_info(path):
    v = load_volume(path)
    kind = "mask" if isinstance(v, Mask3D) else "volume"
    d, h, w = v.dims
    click.echo(json.dumps({
        "kind": kind, "dims": [d, h, w], "spacing": list(v.spacing),
        "min": float(v.data.min()), "max": float(v.data.max()),
    }))


@vol.command("normalize")
@click.argument("src", type=click.Path(exists=True))
@click.argument("dst", type=click.Path())
def vol_normalize(src, dst):
    save_volume(minmax_normalize(_load_typed(src, Volume3D)), dst)


@vol.command("crop")
@click.argument("src", type=click.Path(exists=True))
@click.argument("dst", type=click.Path())
@click.option("--target", required=True, help="D,H,W")
def vol_crop(src, dst, target):
    dims = tuple(int(x) for x in target.split(","))
    if len(dims) != 3:
        raise click.ClickException("--target must be D,H,W")
    save_volume(crop_to_nonzero_then_fit(_load_typed(src, Volume3D), dims), dst)


# ---------------------------------------------------------------------------
# fda
# ---------------------------------------------------------------------------

@click.group()
def fda():
    """Low-frequency amplitude transfer between volumes."""


@fda.command("apply")
@click.option("--src", required=True, type=click.Path(exists=True))
@click.option("--tgt", required=True, type=click.Path(exists=True))
@click.option("--L", "l_value", required=True, type=float)
@click.option("--out", required=True, type=click.Path())
def fda_apply(src, tgt, l_value, out):
    x_src = _load_typed(src, Volume3D)
    x_tgt = _load_typed(tgt, Volume3D)
    save_volume(fourier.apply_fda(x_src, x_tgt, l_value), out)


@fda.command("spectrum")
@click.argument("src", type=click.Path(exists=True))
@click.option("--out-amp", required=True, type=click.Path())
@click.option("--out-phase", required=True, type=click.Path())
def fda_spectrum(src, out_amp, out_phase):
    s = fourier.fft3_centered(_load_typed(src, Volume3D))
    save_volume(Volume3D(s.amplitude.astype(np.float32)), out_amp)
    save_volume(Volume3D(s.phase.astype(np.float32)), out_phase)


# ---------------------------------------------------------------------------
# schedule / ema
# ---------------------------------------------------------------------------

@click.group()
def schedule():
    """Adversarial-weight ramp schedule."""


@schedule.command("lambda")
@click.option("--max", "lambda_max", required=True, type=float)
@click.option("--gamma", required=True, type=float)
@click.option("--t0", required=True, type=float)
@click.option("--warmup", type=int, default=0, show_default=True)
@click.option("--freeze-after", type=float, default=None)
@click.option("--at", "t", required=True, type=float)
def schedule_lambda(lambda_max, gamma, t0, warmup, freeze_after, t):
    s = sched_mod.LambdaSchedule(lambda_max, gamma, t0, warmup, freeze_after)
    click.echo(f"{sched_mod.lambda_at(s, t):.9f}")


@click.group()
def ema():
    """Exponential moving average of parameter vectors."""


@ema.command("blend")
@click.option("--teacher", required=True, type=click.Path(exists=True))
@click.option("--student", required=True, type=click.Path(exists=True))
@click.option("--alpha", required=True, type=float)
@click.option("--out", required=True, type=click.Path())
def ema_blend_cmd(teacher, student, alpha, out):
    blended = sched_mod.ema_blend(sched_mod.load_pvec(teacher),
                                  sched_mod.load_pvec(student), alpha)
    sched_mod.save_pvec(blended, out)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@click.group()
def metrics_cli():
    """Segmentation evaluation metrics."""


@metrics_cli.command("eval")
@click.option("--pred", required=True, type=click.Path(exists=True))
@click.option("--gt", required=True, type=click.Path(exists=True))
@click.option("--report", required=True, type=click.Path())
@click.option("--connectivity", type=int, default=26, show_default=True)
def metrics_eval(pred, gt, report, connectivity):
    """Exit code 2 when HD95 is undefined (an empty mask)."""
    p = _load_typed(pred, Mask3D)
    g = _load_typed(gt, Mask3D)
    rec = {
        "dice": metrics_mod.dice(p, g),
        "cc_pred": metrics_mod.count_components(p, connectivity),
        "cc_gt": metrics_mod.count_components(g, connectivity),
    }
    undefined = False
    try:
        rec["hd95_voxels"] = metrics_mod.hd95(p, g)
    except metrics_mod.UndefinedMetricError:
        rec["hd95_voxels"] = None
        undefined = True
    Path(report).write_text(json.dumps(rec, sort_keys=True) + "\n")
    if undefined:
        sys.exit(2)


# ---------------------------------------------------------------------------
# curate
# ---------------------------------------------------------------------------

def load_proposals_jsonl(path):
    """Read stored proposals grouped by case id."""
    by_case = defaultdict(list)
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            r0, r1, c0, c1 = rec["bbox"]
            by_case[rec["case"]].append(curation.SliceProposal(
                slice_index=int(rec["slice"]),
                mask=decode_rle(rec["rle"], int(rec["h"]), int(rec["w"])),
                confidence=float(rec["conf"]),
                bbox=BBox2D(r0, r1, c0, c1),
            ))
    return dict(by_case)


@click.group()
def curate():
    """Pseudo-label refinement and selection."""


@curate.command("refine")
@click.option("--teacher", required=True, type=click.Path(exists=True))
@click.option("--proposals", required=True, type=click.Path(exists=True))
@click.option("--case", default=None, help="Case id; defaults to the only case present.")
@click.option("--tau", required=True, type=float)
@click.option("--out", required=True, type=click.Path())
def curate_refine(teacher, proposals, case, tau, out):
    y0 = _load_typed(teacher, Mask3D)
    by_case = load_proposals_jsonl(proposals)
    if case is None:
        if len(by_case) != 1:
            raise click.ClickException("multiple cases in proposals; pass --case")
        case = next(iter(by_case))
    refined = curation.refine_volume(y0, by_case.get(case, []), curation.RefineConfig(tau))
    save_volume(refined, out)


@curate.command("select")
@click.option("--proposals", required=True, type=click.Path(exists=True))
@click.option("--tau-conf", required=True, type=float)
@click.option("--overlap", required=True, help="lo:hi (closed interval)")
@click.option("--max-cc", required=True, type=int)
@click.option("--connectivity", type=int, default=26, show_default=True)
@click.option("--clip-to-box", is_flag=True, default=False)
@click.option("--report", required=True, type=click.Path())
def curate_select(proposals, tau_conf, overlap, max_cc, connectivity, clip_to_box, report):
    lo, hi = (float(x) for x in overlap.split(":"))
    cfg = curation.SelectConfig(tau_conf, lo, hi, max_cc, connectivity, clip_to_box)
    by_case = load_proposals_jsonl(proposals)
    reports = []
    for case in sorted(by_case):
        props = by_case[case]
        reports.append(curation.select_case(case, props, cfg) if props
                       else curation.empty_case_report(case))
    lines = [json.dumps(r.to_json(), sort_keys=True) for r in reports]
    lines.append(json.dumps({"summary": curation.summarize_reports(reports)}, sort_keys=True))
    Path(report).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# selftrain
# ---------------------------------------------------------------------------

@click.group()
def selftrain():
    """Two-phase self-training orchestration."""


@selftrain.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--resume", is_flag=True, default=False)
@click.option("--skip-phase1", is_flag=True, default=False)
def selftrain_run(config_path, resume, skip_phase1):
    cfg = driver.load_config(config_path)
    if not skip_phase1 and not resume:
        driver.phase1_prepare(cfg)
    manifests = driver.run_cycles(cfg, resume=resume)
    for m in manifests:
        click.echo(str(m))


@selftrain.command("sweep")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--grids", "grids_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_csv", type=click.Path(), default=None)
def selftrain_sweep(config_path, grids_path, out_csv):
    cfg = driver.load_config(config_path)
    grids = None
    if grids_path:
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(grids_path, "rb") as f:
            grids = tomllib.load(f)
    if out_csv is None:
        out_csv = cfg.out_dir / "sweep.csv"
    rows = driver.grid_sweep(cfg, grids, Path(out_csv))
    click.echo(f"{len(rows)} configurations -> {out_csv}")
