"""Synthetic desk-scale datasets for driver tests.

Cases are intensity volumes with a bright spherical blob; ground truth is the
blob mask. Teacher predictions are set to the ground truth so bounding-box
prompts exist on every blob slice. Case ids are prefixed oracle_/noise_ so a
single mixed mock proposer can serve both populations.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from voladapt.volume import Mask3D, Volume3D, save_volume


def diamond_mask(dims, center, radius):
    """Solid L1 ball; slice cross-sections fill ~half of their bounding box,
    which keeps the overlap ratio well inside the [0.4, 0.8] band."""
    grid = np.indices(dims)
    dist = sum(np.abs(g - c) for g, c in zip(grid, center))
    return Mask3D((dist <= radius).astype(np.uint8))


def blob_case(rng, dims=32, r_range=None):
    d = dims
    if r_range is None:
        r_range = (max(3, d // 5), max(5, d // 3))
    r = int(rng.integers(*r_range))
    center = tuple(int(rng.integers(r + 2, d - r - 2)) for _ in range(3))
    mask = diamond_mask((d, d, d), center, r)
    intensity = rng.random((d, d, d)).astype(np.float32) * 0.2
    intensity[mask.data == 1] += 0.7
    return Volume3D(intensity), mask


def build_desk_dataset(root: Path, n_oracle=10, n_noise=10, n_source=3, dims=32,
                       seed=0, r_range=None):
    rng = np.random.default_rng(seed)
    for sub in ("source/images", "source/labels", "target/images", "predictions", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    for k in range(n_source):
        vol, mask = blob_case(rng, dims, r_range)
        save_volume(vol, root / "source" / "images" / f"src_{k:02d}.vol")
        save_volume(mask, root / "source" / "labels" / f"src_{k:02d}.vol")

    cases = [f"oracle_{k:02d}" for k in range(n_oracle)] + \
            [f"noise_{k:02d}" for k in range(n_noise)]
    for case in cases:
        vol, mask = blob_case(rng, dims, r_range)
        save_volume(vol, root / "target" / "images" / f"{case}.vol")
        save_volume(mask, root / "predictions" / f"{case}.vol")
        save_volume(mask, root / "gt" / f"{case}.vol")
    return cases


def mixed_proposer_command(python, gt_dir, seed=0, density=0.05,
                           conf_oracle=0.95, conf_noise=0.5):
    return [python, "-m", "voladapt.mocks", "mixed",
            "--gt-dir", str(gt_dir), "--oracle-prefix", "oracle",
            "--conf-oracle", str(conf_oracle), "--seed", str(seed),
            "--density", str(density), "--conf-noise", str(conf_noise)]
