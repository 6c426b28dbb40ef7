import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emac import sam
from emac.autodiff import ContractError
from emac.sam import MaskPlan


def brute_top_k(v, k, descending=True):
    order = sorted(range(len(v)), key=lambda i: ((-v[i] if descending else v[i]), i))
    return set(order[:k])


class TestBudget:
    def test_full_mask(self, rng):
        assert sam.sample_token_budget(16, 16, 1.0, 1.0, rng) == (0, 0)

    def test_total_at_default_ratio(self, rng):
        for _ in range(200):
            i, d = sam.sample_token_budget(100, 100, 0.72, 1.0, rng)
            assert i + d == 56 and 0 <= i <= 100 and 0 <= d <= 100

    def test_monte_carlo_mean(self):
        r = np.random.default_rng(0)
        draws = [sam.sample_token_budget(100, 100, 0.72, 1.0, r)[0] for _ in range(100_000)]
        assert abs(np.mean(draws) - 28) < 0.02 * 28

    def test_overflow_pushed_to_other_modality(self, rng):
        for _ in range(200):
            i, d = sam.sample_token_budget(4, 20, 0.5, 1.0, rng)
            assert i + d == 12 and i <= 4 and d <= 20

    def test_round_half_up(self):
        assert sam.round_half_up(2.5) == 3 and sam.round_half_up(3.5) == 4 and sam.round_half_up(0.49) == 0

    def test_per_modality(self, rng):
        assert sam.sample_token_budget(16, 16, 0.72, 1.0, rng, mode="per_modality") == (4, 4)

    @pytest.mark.parametrize("ratio,alpha", [(-0.1, 1.0), (1.1, 1.0), (0.5, 0.0)])
    def test_invalid_args(self, rng, ratio, alpha):
        with pytest.raises(ContractError):
            sam.sample_token_budget(4, 4, ratio, alpha, rng)


class TestAdaptiveMask:
    def test_descending(self, rng):
        keep, desc = sam.adaptive_mask([3, 0, 5, 1], 2, 0.0, rng)
        assert set(keep.tolist()) == {2, 0} and desc

    def test_ascending(self, rng):
        keep, desc = sam.adaptive_mask([3, 0, 5, 1], 2, 1.0, rng)
        assert set(keep.tolist()) == {1, 3} and not desc

    def test_stable_ties(self, rng):
        keep, _ = sam.adaptive_mask([0, 0, 2, 0], 2, 0.0, rng)
        assert keep.tolist() == [2, 0]

    def test_matches_brute_force(self):
        r = np.random.default_rng(1)
        for _ in range(300):
            n = int(r.integers(1, 30))
            v = r.integers(0, 4, n).astype(float)
            k = int(r.integers(0, n + 1))
            keep, _ = sam.adaptive_mask(v, k, 0.0, r)
            assert set(keep.tolist()) == brute_top_k(v, k)

    def test_branch_frequency(self):
        r = np.random.default_rng(2)
        asc = sum(not sam.adaptive_mask(np.arange(4.0), 1, 0.2, r)[1] for _ in range(100_000))
        assert abs(asc / 100_000 - 0.2) < 0.01

    def test_separation_property(self, rng):
        v = rng.random(20)
        keep, desc = sam.adaptive_mask(v, 7, 0.0, rng)
        rest = np.setdiff1d(np.arange(20), keep)
        assert desc and v[keep].min() >= v[rest].max()

    def test_foreground_coverage(self, rng):
        v = np.zeros(16)
        fg = [3, 7, 12]
        v[fg] = [0.5, 2.0, 1.0]
        keep, _ = sam.adaptive_mask(v, 5, 0.0, rng)
        assert set(fg) <= set(keep.tolist())

    def test_bad_budget(self, rng):
        with pytest.raises(ContractError):
            sam.adaptive_mask([1, 2], 3, 0.0, rng)


class TestDensityMask:
    def test_full_and_empty(self, rng):
        assert MaskPlan(0, 5, [], sam.random_density_mask(5, 5, rng)).mask_random.tolist() == [0] * 5
        assert MaskPlan(0, 5, [], sam.random_density_mask(5, 0, rng)).mask_random.tolist() == [1] * 5

    def test_uniform_frequency(self):
        r = np.random.default_rng(3)
        hits = np.zeros(10)
        for _ in range(100_000):
            hits[sam.random_density_mask(10, 3, r)] += 1
        assert np.all(np.abs(hits / 100_000 - 0.3) < 0.01)


class TestPlanAndRestore:
    def test_invariants(self, rng):
        for _ in range(100):
            v = rng.random(16)
            plan = sam.plan_mask(v, 16, 0.72, 0.2, 1.0, rng)
            assert plan.n_kept == 9
            assert int((1 - plan.mask_adaptive).sum()) == plan.n_image_kept
            assert int((1 - plan.mask_random).sum()) == plan.n_density_kept
            assert plan.keep_set == set(np.flatnonzero(plan.mask_adaptive == 0).tolist())

    def test_seed_determinism(self):
        a = sam.plan_mask(np.arange(16.0), 16, 0.72, 0.2, 1.0, sam.make_rng(5, 1))
        b = sam.plan_mask(np.arange(16.0), 16, 0.72, 0.2, 1.0, sam.make_rng(5, 1))
        assert np.array_equal(a.token_index(), b.token_index()) and a.sort_descending == b.sort_descending

    def test_keep_all_identity(self):
        tokens = np.arange(12.0).reshape(6, 2)
        kept, pos = sam.select_and_restore(tokens, MaskPlan.keep_all(3, 3))
        assert np.array_equal(kept, tokens) and pos.tolist() == list(range(6))

    def test_restored_order(self):
        plan = MaskPlan(4, 0, [2, 0], [])
        kept, pos = sam.select_and_restore(np.array([[10.0], [11.0], [12.0], [13.0]]), plan)
        assert kept[:, 0].tolist() == [10.0, 12.0] and pos.tolist() == [0, 2]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
    def test_select_reinsert_round_trip(self, seed, ratio, brp):
        r = np.random.default_rng(seed)
        tokens = r.standard_normal((32, 3))
        plan = sam.plan_mask(r.random(16), 16, ratio, brp, 1.0, r)
        kept, pos = sam.select_and_restore(tokens, plan)
        assert np.all(np.diff(pos) > 0)
        filler = np.zeros_like(tokens)
        filler[pos] = tokens[pos]
        assert np.array_equal(sam.reinsert(kept, pos, filler), filler)
        full = tokens.copy()
        full[pos] = 0
        assert np.array_equal(sam.reinsert(kept, pos, full), tokens)

    def test_inconsistent_plan(self):
        with pytest.raises(ContractError):
            sam.select_and_restore(np.zeros((5, 2)), MaskPlan.keep_all(3, 3))
        with pytest.raises(ContractError):
            MaskPlan(4, 4, [0, 0], [])

    def test_random_image_baseline(self, rng):
        plan = sam.plan_mask(np.arange(16.0), 16, 0.5, 0.2, 1.0, rng, image_masking="random")
        assert plan.n_kept == 16

    def test_visualisation_dims_masked_patches(self):
        img = np.ones((16, 16))
        out = sam.mask_visualization(img, MaskPlan(4, 4, [1], []), 8)
        assert out[0, 8] == 1.0 and out[0, 0] == 0.25 and out[15, 15] == 0.25
