import numpy as np
import pytest

from conftest import random_mask
from oracles import brute_hd95, brute_surface, flood_fill_count
from voladapt.metrics import (
    UndefinedMetricError,
    count_components,
    dice,
    hd95,
    label_components,
    soft_dice_loss,
    surface_voxels,
)
from voladapt.volume import Mask3D, Volume3D


def mask_from_coords(dims, coords):
    a = np.zeros(dims, dtype=np.uint8)
    for c in coords:
        a[c] = 1
    return Mask3D(a)


class TestDice:
    def test_identical(self, rng):
        m = random_mask(rng, (6, 6, 6))
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = mask_from_coords((4, 4, 4), [(0, 0, 0)])
        b = mask_from_coords((4, 4, 4), [(3, 3, 3)])
        assert dice(a, b) == 0.0

    def test_shifted_cube(self):
        a = np.zeros((4, 4, 4), dtype=np.uint8)
        a[0:2, 0:2, 0:2] = 1
        b = np.zeros((4, 4, 4), dtype=np.uint8)
        b[0:2, 0:2, 1:3] = 1
        assert dice(Mask3D(a), Mask3D(b)) == pytest.approx(0.5)

    def test_both_empty(self):
        e = Mask3D(np.zeros((3, 3, 3), dtype=np.uint8))
        assert dice(e, e) == 1.0

    def test_one_empty(self, rng):
        e = Mask3D(np.zeros((5, 5, 5), dtype=np.uint8))
        m = mask_from_coords((5, 5, 5), [(1, 1, 1)])
        assert dice(e, m) == 0.0

    def test_symmetric_bounded(self, rng):
        for _ in range(20):
            a = random_mask(rng, (5, 5, 5))
            b = random_mask(rng, (5, 5, 5))
            d = dice(a, b)
            assert d == dice(b, a)
            assert 0.0 <= d <= 1.0

    def test_dims_mismatch(self):
        with pytest.raises(ValueError):
            dice(Mask3D(np.zeros((2, 2, 2), dtype=np.uint8)),
                 Mask3D(np.zeros((3, 3, 3), dtype=np.uint8)))


class TestSoftDice:
    def test_exact_match_near_zero(self):
        g = np.zeros((4, 4, 4), dtype=np.uint8)
        g[1:3, 1:3, 1:3] = 1
        gt = Mask3D(g)
        pred = Volume3D(g.astype(np.float32))
        eps = 1e-5
        loss = soft_dice_loss(pred, gt, eps)
        assert 0.0 <= loss <= eps / (2 * 8 + eps)

    def test_all_zero_pred(self):
        g = np.zeros((4, 4, 4), dtype=np.uint8)
        g[0, 0, 0] = 1
        eps = 1e-5
        loss = soft_dice_loss(Volume3D(np.zeros((4, 4, 4), dtype=np.float32)), Mask3D(g), eps)
        assert loss == pytest.approx(1.0 - eps / (1 + eps), abs=1e-9)

    def test_half_confidence_closed_form(self):
        # pred 0.5 everywhere, gt half-full on 4^3: loss = 1 - 32/48 = 1/3.
        g = np.zeros((4, 4, 4), dtype=np.uint8)
        g[:2] = 1
        pred = Volume3D(np.full((4, 4, 4), 0.5, dtype=np.float32))
        loss = soft_dice_loss(pred, Mask3D(g), 1e-9)
        assert loss == pytest.approx(1.0 / 3.0, abs=1e-6)

    def test_summation_oracle(self, rng):
        pred = Volume3D(rng.random((5, 5, 5), dtype=np.float32))
        gt = random_mask(rng, (5, 5, 5))
        eps = 1e-5
        p = pred.data.astype(np.float64).ravel()
        g = gt.data.astype(np.float64).ravel()
        expected = 1.0 - (2.0 * sum(pi * gi for pi, gi in zip(p, g)) + eps) / \
            (sum(pi * pi for pi in p) + sum(gi * gi for gi in g) + eps)
        assert soft_dice_loss(pred, gt, eps) == pytest.approx(expected, abs=1e-12)

    def test_decreases_toward_gt(self, rng):
        gt = random_mask(rng, (5, 5, 5), density=0.5)
        pred = rng.random((5, 5, 5)).astype(np.float32)
        base = soft_dice_loss(Volume3D(pred), gt)
        toward = pred + 0.25 * (gt.data.astype(np.float32) - pred)
        assert soft_dice_loss(Volume3D(toward), gt) < base

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            soft_dice_loss(Volume3D(np.full((2, 2, 2), 1.5, dtype=np.float32)),
                           Mask3D(np.zeros((2, 2, 2), dtype=np.uint8)))


class TestComponents:
    def test_solid_cube(self):
        a = np.zeros((5, 5, 5), dtype=np.uint8)
        a[1:4, 1:4, 1:4] = 1
        for conn in (6, 26):
            assert count_components(Mask3D(a), conn) == 1

    def test_diagonal_pair(self):
        m = mask_from_coords((2, 2, 2), [(0, 0, 0), (0, 1, 1)])
        assert count_components(m, 6) == 2
        assert count_components(m, 26) == 1

    def test_empty(self):
        m = Mask3D(np.zeros((3, 3, 3), dtype=np.uint8))
        lab = label_components(m)
        assert lab.count == 0 and not lab.labels.any()

    def test_invalid_connectivity(self, rng):
        with pytest.raises(ValueError):
            label_components(random_mask(rng, (3, 3, 3)), 18)

    def test_scan_order_numbering(self):
        m = mask_from_coords((1, 1, 6), [(0, 0, 0), (0, 0, 3), (0, 0, 5)])
        lab = label_components(m, 6)
        assert lab.labels[0, 0, 0] == 1
        assert lab.labels[0, 0, 3] == 2
        assert lab.labels[0, 0, 5] == 3

    def test_sizes_sum_to_foreground(self, rng):
        m = random_mask(rng, (8, 8, 8), density=0.35)
        lab = label_components(m, 26)
        assert (lab.labels > 0).sum() == m.data.sum()

    def test_against_flood_fill_200(self, rng):
        for _ in range(200):
            m = random_mask(rng, (8, 8, 8), density=float(rng.uniform(0.05, 0.6)))
            for conn in (6, 26):
                assert count_components(m, conn) == flood_fill_count(m.data, conn)


class TestSurface:
    def test_single_voxel(self):
        m = mask_from_coords((3, 3, 3), [(1, 1, 1)])
        assert surface_voxels(m).tolist() == [[1, 1, 1]]

    def test_solid_cube_shell(self):
        a = np.zeros((6, 6, 6), dtype=np.uint8)
        a[1:5, 1:5, 1:5] = 1
        surf = surface_voxels(Mask3D(a))
        assert len(surf) == 4 ** 3 - 2 ** 3  # 56 shell voxels
        assert [2, 2, 2] not in surf.tolist()

    def test_empty(self):
        assert surface_voxels(Mask3D(np.zeros((2, 2, 2), dtype=np.uint8))).size == 0

    def test_against_brute(self, rng):
        m = random_mask(rng, (6, 6, 6), density=0.4)
        got = sorted(map(tuple, surface_voxels(m).tolist()))
        assert got == sorted(brute_surface(m.data))


class TestHD95:
    def test_identical_zero(self, rng):
        m = random_mask(rng, (6, 6, 6), density=0.4)
        if not m.data.any():
            pytest.skip("empty draw")
        assert hd95(m, m) == 0.0

    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_two_point_distance(self, k):
        a = mask_from_coords((1, 1, 8), [(0, 0, 0)])
        b = mask_from_coords((1, 1, 8), [(0, 0, k)])
        assert hd95(a, b) == pytest.approx(float(k))

    def test_empty_raises(self, rng):
        e = Mask3D(np.zeros((4, 4, 4), dtype=np.uint8))
        m = mask_from_coords((4, 4, 4), [(1, 1, 1)])
        with pytest.raises(UndefinedMetricError):
            hd95(e, m)
        with pytest.raises(UndefinedMetricError):
            hd95(m, e)

    def test_symmetric_and_translation_invariant(self, rng):
        a = np.zeros((10, 10, 10), dtype=np.uint8)
        b = np.zeros((10, 10, 10), dtype=np.uint8)
        a[2:5, 2:5, 2:5] = 1
        b[3:7, 2:6, 2:5] = 1
        v = hd95(Mask3D(a), Mask3D(b))
        assert v == hd95(Mask3D(b), Mask3D(a))
        assert hd95(Mask3D(np.roll(a, 2, axis=2)), Mask3D(np.roll(b, 2, axis=2))) \
            == pytest.approx(v, abs=1e-9)

    def test_spacing_scales(self):
        a = mask_from_coords((1, 1, 4), [(0, 0, 0)])
        b = mask_from_coords((1, 1, 4), [(0, 0, 2)])
        assert hd95(a, b, spacing=(1.0, 1.0, 2.5)) == pytest.approx(5.0)

    def test_against_brute_oracle(self, rng):
        checked = 0
        while checked < 30:
            a = random_mask(rng, (12, 12, 12), density=0.15)
            b = random_mask(rng, (12, 12, 12), density=0.15)
            if not (a.data.any() and b.data.any()):
                continue
            assert hd95(a, b) == pytest.approx(brute_hd95(a.data, b.data), abs=1e-6)
            checked += 1
