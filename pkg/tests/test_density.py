import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emac import density
from emac.autodiff import ContractError
from emac.density import AnnotationError, TilingError


def reference_kernel(x, y, h, w, sigma=6.0, truncate=4.0):
    """Independent per-point oracle: separable truncated Gaussian with unit mass."""
    reach = truncate * sigma
    cols = [c for c in range(w) if abs(c - x) <= reach]
    rows = [r for r in range(h) if abs(r - y) <= reach]
    kx = {c: math.exp(-((c - x) ** 2) / (2 * sigma**2)) for c in cols}
    ky = {r: math.exp(-((r - y) ** 2) / (2 * sigma**2)) for r in rows}
    sx, sy = sum(kx.values()), sum(ky.values())
    out = np.zeros((h, w))
    for r in rows:
        for c in cols:
            out[r, c] = (ky[r] / sy) * (kx[c] / sx)
    return out


class TestRasterize:
    def test_empty(self):
        d = density.rasterize_density([], 16, 16)
        assert d.shape == (16, 16) and not d.any()

    def test_single_centre_point(self):
        d = density.rasterize_density([(32, 32)], 64, 64, sigma=6)
        assert abs(d.sum() - 1.0) < 1e-9
        assert np.max(np.abs(d - reference_kernel(32, 32, 64, 64))) < 1e-15

    def test_five_points_linear(self, rng):
        pts = rng.uniform(0, 64, (5, 2))
        d = density.rasterize_density(pts, 64, 64)
        oracle = sum(reference_kernel(x, y, 64, 64) for x, y in pts)
        assert abs(d.sum() - 5.0) < 1e-9
        assert np.max(np.abs(d - oracle)) < 1e-14

    def test_corner_point_keeps_unit_mass(self):
        d = density.rasterize_density([(0.0, 63.9)], 64, 64)
        assert abs(d.sum() - 1.0) < 1e-12 and np.all(d >= 0)

    def test_out_of_bounds_names_frame_and_point(self):
        with pytest.raises(AnnotationError, match=r"frame 7: point 1"):
            density.rasterize_density([(1, 1), (64, 3)], 64, 64, frame=7)

    def test_negative_coordinate_rejected(self):
        with pytest.raises(AnnotationError):
            density.rasterize_density([(-0.1, 3)], 8, 8)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 31.999), st.floats(0, 23.999)), max_size=12), st.floats(0.5, 10))
    def test_count_conservation(self, pts, sigma):
        d = density.rasterize_density(pts, 24, 32, sigma=sigma)
        assert abs(d.sum() - len(pts)) < 1e-9
        assert np.all(d >= 0)


class TestPatchCounts:
    def test_uniform(self):
        v = density.patch_counts(np.full((16, 16), 1 / 256), 8)
        assert np.allclose(v, [0.25] * 4, atol=1e-15)

    def test_impulse(self):
        d = np.zeros((16, 16))
        d[0, 0] = 1
        assert np.array_equal(density.patch_counts(d, 8), [1, 0, 0, 0])

    def test_matches_double_loop(self, rng):
        d = rng.random((32, 32))
        expect = []
        for pr in range(4):
            for pc in range(4):
                s = 0.0
                for y in range(pr * 8, pr * 8 + 8):
                    for x in range(pc * 8, pc * 8 + 8):
                        s += d[y, x]
                expect.append(s)
        assert np.max(np.abs(density.patch_counts(d, 8) - expect)) < 1e-12

    def test_row_major_order(self):
        d = np.zeros((16, 32))
        d[9, 20] = 1.0
        v = density.patch_counts(d, 8)
        assert v.argmax() == 1 * 4 + 2

    def test_tiling_error(self):
        with pytest.raises(TilingError):
            density.patch_counts(np.zeros((12, 16)), 8)

    def test_mass_conserved(self, rng):
        d = density.rasterize_density(rng.uniform(0, 32, (7, 2)), 32, 32)
        assert abs(density.patch_counts(d, 8).sum() - d.sum()) < 1e-9


class TestStandardizer:
    def test_round_trip_within_rounding(self, rng):
        maps = [rng.random((8, 8)) * 0.05 for _ in range(3)]
        s = density.fit_standardizer(maps)
        x = rng.random((8, 8)) * 0.05
        back = s.destandardize(s.standardize(x))
        # two correctly rounded operations each way: a few ulps at most
        assert np.max(np.abs(back - x)) <= 4 * np.spacing(np.max(np.abs(x)) + abs(s.mean))

    def test_constant_corpus_guard(self):
        s = density.fit_standardizer([np.full((4, 4), 0.3)] * 2)
        assert s.scale == density.STD_FLOOR
        assert not s.standardize(np.full((4, 4), 0.3)).any()

    def test_standardised_statistics(self, rng):
        maps = [density.rasterize_density(rng.uniform(0, 32, (int(rng.integers(1, 9)), 2)), 32, 32) for _ in range(6)]
        s = density.fit_standardizer(maps)
        z = np.concatenate([s.standardize(m).ravel() for m in maps])
        assert abs(z.mean()) < 1e-10
        assert abs(z.std() - 1.0) < 1e-10

    def test_empty_training_set(self):
        with pytest.raises(ContractError):
            density.fit_standardizer([])

    def test_dict_round_trip(self):
        s = density.Standardizer(0.0012, 0.0034)
        assert density.Standardizer.from_dict(s.to_dict()) == s


class TestEvaluate:
    def test_perfect(self):
        m = density.evaluate([3, 4, 5], [3, 4, 5])
        assert m.mae == 0 and m.rmse == 0 and m.n == 3

    def test_hand_values(self):
        m = density.evaluate([10, 12], [11, 11])
        assert m.mae == 1.0 and m.rmse == 1.0

    def test_against_recomputation(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 40))
            p, g = rng.normal(10, 3, n), rng.normal(10, 3, n)
            m = density.evaluate(p, g)
            mae = sum(abs(a - b) for a, b in zip(p, g)) / n
            rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, g)) / n)
            assert abs(m.mae - mae) < 1e-12 and abs(m.rmse - rmse) < 1e-12
            assert m.rmse >= m.mae >= 0

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            density.evaluate([1, 2], [1])

    def test_map_count_clamps(self):
        d = np.array([[1.0, -0.5], [0.25, 0.0]])
        assert density.map_count(d) == 1.25
        assert density.map_count(d, clamp=False) == 0.75
