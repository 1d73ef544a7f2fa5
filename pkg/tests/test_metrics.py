import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spheremorph.fields import DeformationField, FeatureMap, LabelMap
from spheremorph.grid import great_circle, make_grid, polar_to_cartesian
from spheremorph.integrate import scaling_and_squaring
from spheremorph.metrics import (boundary_mask, dice, evaluate_labels, group_stats, jacobian_map,
                                 mmd, mmd_directed, overall_dice)
from spheremorph.synth import gen_smooth_velocity, voronoi_labels


def _random_labels(grid, n, seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((n, 3))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return LabelMap(grid, voronoi_labels(c, grid.xyz()))


class TestDice:
    def test_identical_and_disjoint(self, grid8):
        a = np.zeros(grid8.shape, dtype=int)
        a[2:4, 3:9] = 1
        b = np.zeros(grid8.shape, dtype=int)
        b[5:7] = 1
        A, B = LabelMap(grid8, a), LabelMap(grid8, b)
        assert dice(A, A, 1) == 1.0
        assert dice(A, B, 1) == 0.0

    def test_half_row_overlap(self):
        g = make_grid(8, 16)
        a = np.zeros(g.shape, dtype=int)
        a[3, 0:8] = 1
        b = np.zeros(g.shape, dtype=int)
        b[3, 4:12] = 1
        assert dice(LabelMap(g, a), LabelMap(g, b), 1) == pytest.approx(0.5, abs=1e-15)

    def test_area_weighted(self):
        g = make_grid(8, 16)
        a = np.zeros(g.shape, dtype=int)
        a[0, :] = 1
        a[4, :] = 1
        b = np.zeros(g.shape, dtype=int)
        b[4, :] = 1
        s = g.sin_lat
        assert dice(LabelMap(g, a), LabelMap(g, b), 1) == pytest.approx(2 * s[4] / (s[0] + 2 * s[4]), rel=1e-14)

    def test_absent_region(self, grid8):
        A = LabelMap(grid8, np.ones(grid8.shape, dtype=int))
        assert dice(A, A, 7) is None
        rep = evaluate_labels(A, A)
        assert list(rep.dice) == [1]

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 31))
    def test_symmetric_and_rotation_invariant(self, seed, k):
        g = make_grid(16, 32)
        a, b = _random_labels(g, 6, seed), _random_labels(g, 6, seed + 1)
        ra = LabelMap(g, np.roll(a.labels, k, axis=1))
        rb = LabelMap(g, np.roll(b.labels, k, axis=1))
        for r in range(1, 7):
            d = dice(a, b, r)
            assert d == dice(b, a, r)
            if d is not None:
                assert dice(ra, rb, r) == pytest.approx(d, abs=1e-14)


class TestMMD:
    def test_identical(self):
        g = make_grid(16, 32)
        a = _random_labels(g, 5, 0)
        assert all(mmd(a, a, r) == 0.0 for r in a.regions())

    def _column_pair(self, rows):
        g = make_grid(64, 128)
        a = np.zeros(g.shape, dtype=int)
        b = np.zeros(g.shape, dtype=int)
        a[rows, 10] = 1
        b[rows, 11] = 1
        return g, LabelMap(g, a), LabelMap(g, b)

    def test_one_column_shift_equator(self):
        rows = [31, 32]
        g, a, b = self._column_pair(rows)
        ref = [great_circle(polar_to_cartesian(g.longitudes[10], g.latitudes[i]),
                            polar_to_cartesian(g.longitudes[11], g.latitudes[i])) for i in rows]
        assert mmd_directed(a, b, 1) == pytest.approx(np.mean(ref), rel=1e-12)
        assert mmd(a, b, 1) == pytest.approx(mmd(b, a, 1), rel=1e-12)
        assert mmd(a, b, 1) == pytest.approx(2 * np.pi / 128, rel=1e-3)

    def test_one_column_shift_high_latitude(self):
        i = int(round(np.pi / 6 / (np.pi / 64) - 0.5))
        g, a, b = self._column_pair([i])
        _, e, f = self._column_pair([32])
        ratio = mmd(a, b, 1) / mmd(e, f, 1)
        assert ratio == pytest.approx(np.sin(g.latitudes[i]) / np.sin(g.latitudes[32]), rel=1e-3)
        assert ratio == pytest.approx(0.5, abs=0.02)

    def test_empty_boundary(self, grid8):
        a = LabelMap(grid8, np.ones(grid8.shape, dtype=int))
        with pytest.raises(ValueError):
            mmd(a, a, 1)

    def test_boundary_wraps_in_longitude_only(self):
        g = make_grid(4, 8)
        lab = np.zeros(g.shape, dtype=int)
        lab[:, 0] = 1
        m = boundary_mask(LabelMap(g, lab))
        assert m[:, 0].all() and m[:, 1].all() and m[:, 7].all()
        assert not m[:, 2:7].any()

    @settings(max_examples=8, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetry_and_triangle(self, seed):
        g = make_grid(16, 32)
        a, b, c = (_random_labels(g, 4, seed + k) for k in range(3))
        slack = 2 * np.hypot(g.dtheta, g.dphi)
        for r in range(1, 5):
            try:
                ab, bc, ac = mmd(a, b, r), mmd(b, c, r), mmd(a, c, r)
            except ValueError:
                continue
            assert ab == pytest.approx(mmd(b, a, r), rel=1e-12)
            assert ac <= ab + bc + slack


class TestJacobian:
    def test_identity(self, grid8):
        det, stats = jacobian_map(DeformationField.zeros(grid8))
        np.testing.assert_array_equal(det.data, 1.0)
        assert stats["fraction_nonpositive"] == 0.0

    @pytest.mark.parametrize("shift", [0.1, 2 * np.pi / 16, -1.3])
    def test_uniform_longitude_shift(self, grid8, shift):
        d = np.zeros((2,) + grid8.shape)
        d[0] = shift
        det, _ = jacobian_map(DeformationField(grid8, d))
        np.testing.assert_allclose(det.data, 1.0, atol=1e-6)

    def test_latitude_compression(self):
        g = make_grid(32, 64)
        _, phi = g.mesh()
        d = np.stack([np.zeros(g.shape), -0.1 * (phi - np.pi / 2)])
        det, _ = jacobian_map(DeformationField(g, d))
        expected = 0.9 * np.sin(phi + d[1]) / np.sin(phi)
        np.testing.assert_allclose(det.data[0], expected, atol=1e-3)

    def test_fold_detected(self, grid8):
        d = np.zeros((2,) + grid8.shape)
        d[0, :, 5] = 3 * grid8.dtheta
        _, stats = jacobian_map(DeformationField(grid8, d))
        assert 0 < stats["fraction_nonpositive"] <= 1

    @pytest.mark.parametrize("seed", [0, 1])
    def test_smooth_exponential_has_few_folds(self, seed):
        g = make_grid(64, 128)
        phi = scaling_and_squaring(gen_smooth_velocity(g, 0.2, seed=seed))
        assert jacobian_map(phi)[1]["fraction_nonpositive"] <= 0.01


class TestGroupStats:
    def test_identical(self, grid8, rng):
        x = FeatureMap(grid8, rng.standard_normal(grid8.shape))
        mean, std = group_stats([x, x, x])
        np.testing.assert_array_equal(std.data, 0.0)
        np.testing.assert_array_equal(mean.data, x.data)

    def test_two_maps(self, grid8):
        mean, std = group_stats([FeatureMap(grid8, np.zeros(grid8.shape)), FeatureMap(grid8, np.full(grid8.shape, 2.0))])
        np.testing.assert_array_equal(mean.data, 1.0)
        np.testing.assert_array_equal(std.data, 1.0)

    def test_needs_two(self, grid8):
        with pytest.raises(ValueError):
            group_stats([FeatureMap(grid8, np.zeros(grid8.shape))])


class TestReport:
    def test_identical_labels(self):
        g = make_grid(16, 32)
        a = _random_labels(g, 5, 3)
        rep = evaluate_labels(a, a, DeformationField.zeros(g), radius_mm=100.0)
        assert rep.overall_dice == 1.0 and rep.overall_mmd == 0.0
        assert rep.jacobian["fraction_nonpositive"] == 0.0
        d = rep.to_dict()
        assert set(d["dice"]) == {"1", "2", "3", "4", "5"}
        assert d["overall_mmd_mm"] == 0.0

    def test_millimetres(self):
        g = make_grid(16, 32)
        a, b = _random_labels(g, 5, 3), _random_labels(g, 5, 4)
        rep = evaluate_labels(a, b, radius_mm=50.0)
        assert rep.overall_mmd_mm == pytest.approx(50.0 * rep.overall_mmd)
        assert 0 <= rep.overall_dice <= 1
        assert rep.overall_dice == pytest.approx(overall_dice(a, b))
        assert all(v >= 0 for v in rep.mmd.values())
