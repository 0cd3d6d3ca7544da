import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from streamkv.cache_engine import BudgetConfig
from streamkv.errors import ConfigError, GeometryError
from streamkv.harness import oracle_combined_select, oracle_pool, oracle_tar_scores
from streamkv.kvcore import FrameGeometry, coefficient_of_variation
from streamkv.scoring import (
    PoolingConfig,
    Provenance,
    ScoreMap,
    adaptive_pool_van,
    combine_select,
    infinipot_select,
    recent_indices,
    tar_scores,
    tar_select,
    tar_select_reverse,
    van_scores,
)

G22 = FrameGeometry.from_grid(2, 2)
G33 = FrameGeometry.from_grid(3, 3)


class TestScoreMap:
    def test_addressing(self):
        sm = ScoreMap(np.arange(18.0), G33)
        assert sm.flat_index(1, 2, 0) == 9 + 6
        assert sm.at(1, 2, 0) == 15.0
        assert sm.num_frames == 2

    def test_partial_frame(self):
        with pytest.raises(GeometryError):
            ScoreMap(np.zeros(5), G22)


class TestPoolingConfig:
    def test_mapping_half_open(self):
        pc = PoolingConfig(0.2, 0.4, 0.8)
        assert [pc.kernel_for(x) for x in (0.0, 0.2, 0.39, 0.4, 0.8, 5.0)] == [7, 5, 5, 3, 1, 1]

    def test_strict(self):
        with pytest.raises(ConfigError):
            PoolingConfig(0.2, 0.2, 0.8)


class TestTar:
    def test_identical_keys_score_minus_one(self, rng):
        base = rng.standard_normal((2, 1, 4, 3))
        keys = np.repeat(base, 3, axis=1).reshape(2, 12, 3)
        s = tar_scores(keys, G22, 1)
        np.testing.assert_allclose(s.values, -1.0, atol=1e-12)
        assert len(s) == 8

    def test_orthogonal_keys_score_zero(self):
        keys = np.zeros((1, 8, 2))
        keys[0, :4, 0] = 1.0  # past frame along x
        keys[0, 4:, 1] = 2.0  # recent frame along y
        np.testing.assert_allclose(tar_scores(keys, G22, 1).values, 0.0, atol=1e-12)

    def test_random_vs_brute_force(self, rng):
        keys = rng.standard_normal((2, 16, 5))
        got = tar_scores(keys, G22, 1).values
        np.testing.assert_allclose(got, oracle_tar_scores(keys, G22, 1), atol=1e-6, rtol=0)

    def test_r_too_large(self, rng):
        with pytest.raises(ConfigError):
            tar_scores(rng.standard_normal((1, 8, 3)), G22, 2)

    def test_partial_frames(self, rng):
        with pytest.raises(GeometryError):
            tar_scores(rng.standard_normal((1, 10, 3)), G22, 1)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    def test_bounds_and_scale_invariance(self, seed, r):
        rng = np.random.default_rng(seed)
        keys = rng.standard_normal((2, 4 * 5, 3))
        s = tar_scores(keys, G22, r).values
        assert (s >= -1).all() and (s <= 1).all()
        scaled = keys * rng.uniform(0.1, 10, size=(2, 20, 1))
        np.testing.assert_allclose(tar_scores(scaled, G22, r).values, s, atol=1e-6)

    def test_past_frame_swap_equivariance(self, rng):
        keys = rng.standard_normal((2, 16, 4))
        swapped = keys.copy()
        swapped[:, 0:4], swapped[:, 4:8] = keys[:, 4:8], keys[:, 0:4]
        a = tar_scores(keys, G22, 1).values
        b = tar_scores(swapped, G22, 1).values
        np.testing.assert_allclose(b[0:4], a[4:8], atol=1e-12)
        np.testing.assert_allclose(b[4:8], a[0:4], atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_monotonic_when_made_distinctive(self, seed):
        # orthogonalizing sets the score to 0, which is a raise only for tokens
        # that scored <= 0 (cosine >= 0) before
        rng = np.random.default_rng(seed)
        keys = rng.standard_normal((1, 16, 4))
        scores = tar_scores(keys, G22, 1)
        before = tar_select(scores, 6)
        eligible = [t for t in before.tolist() if scores.values[t] <= 0]
        if not eligible:
            return
        tok = eligible[0]
        recent = keys[0, 12 + tok % 4]
        v = rng.standard_normal(4)
        keys[0, tok] = v - recent * (v @ recent) / (recent @ recent)
        assert tok in tar_select(tar_scores(keys, G22, 1), 6)

    def test_patch_ids_match_plain_layout(self, rng):
        keys = rng.standard_normal((2, 12, 3))
        a = tar_scores(keys, G22, 1).values
        b = tar_scores(keys, G22, 1, patch_ids=np.tile(np.arange(4), 3)).values
        np.testing.assert_array_equal(a, b)


class TestTarSelect:
    def test_full(self):
        sm = ScoreMap(np.arange(8.0), G22)
        assert tar_select(sm, 8).tolist() == list(range(8))

    def test_distinctive_wins(self):
        sm = ScoreMap(np.array([-1.0, 0.0, -1.0, -1.0]), G22)
        assert tar_select(sm, 1).tolist() == [1]
        assert tar_select_reverse(sm, 1).tolist() == [0]

    def test_negative_budget(self):
        with pytest.raises(ConfigError):
            tar_select(ScoreMap(np.zeros(4), G22), -1)

    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).map(np.array), st.integers(0, 4))
    def test_sort_oracle(self, scores, k):
        sm = ScoreMap(scores, G22)
        top = sorted(sorted(range(4), key=lambda i: (-scores[i], i))[:k])
        bottom = sorted(sorted(range(4), key=lambda i: (scores[i], i))[:k])
        assert tar_select(sm, k).tolist() == top
        assert tar_select_reverse(sm, k).tolist() == bottom


class TestVan:
    def test_zero(self):
        assert (van_scores(np.zeros((2, 4, 3)), G22).values == 0).all()

    def test_345(self):
        v = np.zeros((1, 4, 2))
        v[0, 0] = [3, 4]
        assert van_scores(v, G22).values[0] == 5.0

    def test_flatten_oracle(self, rng):
        v = rng.standard_normal((2, 8, 3))
        ref = [np.sqrt(sum(x * x for x in v[:, t, :].ravel().tolist())) for t in range(8)]
        np.testing.assert_allclose(van_scores(v, G22).values, ref, atol=1e-6)


class TestAdaptivePool:
    def test_constant(self):
        pooled, k = adaptive_pool_van(ScoreMap(np.full(18, 2.0), G33), PoolingConfig())
        assert k == 7
        np.testing.assert_allclose(pooled.values, 2.0)

    def test_cv_exactly_tau3_is_identity(self):
        vals = np.array([1.0, 3.0] * 9)
        cv = coefficient_of_variation(vals)
        pooled, k = adaptive_pool_van(ScoreMap(vals, G33), PoolingConfig(cv / 4, cv / 2, cv))
        assert k == 1
        np.testing.assert_array_equal(pooled.values, vals)

    @pytest.mark.parametrize("taus,kernel", [((5, 6, 7), 7), ((0.01, 5, 6), 5), ((0.01, 0.02, 6), 3)])
    def test_window_oracle(self, rng, taus, kernel):
        vals = rng.random(18)
        pooled, k = adaptive_pool_van(ScoreMap(vals, G33), PoolingConfig(*taus))
        assert k == kernel
        ref = np.concatenate([oracle_pool(vals[i * 9 : (i + 1) * 9].reshape(3, 3), k).ravel() for i in range(2)])
        np.testing.assert_allclose(pooled.values, ref, atol=1e-6)

    def test_provenance_full_frames_match_plain(self, rng):
        vals = rng.random(18)
        a, _ = adaptive_pool_van(ScoreMap(vals, G33), PoolingConfig())
        b, _ = adaptive_pool_van(
            ScoreMap(vals, G33), PoolingConfig(), np.tile(np.arange(9), 2), np.repeat([4, 9], 9)
        )
        np.testing.assert_array_equal(a.values, b.values)


class TestCombine:
    def test_alpha_one(self, rng):
        van = ScoreMap(rng.random(16), G22)
        res = combine_select([1, 2, 5, 6], van, [12, 13, 14, 15], 8)
        assert res.indices.tolist() == [1, 2, 5, 6, 12, 13, 14, 15]
        assert set(res.with_tag(Provenance.TAR)) == {1, 2, 5, 6}

    def test_tar_share_only_recent(self, rng):
        vals = rng.random(16)
        res = combine_select([], ScoreMap(vals, G22), [12, 13, 14, 15], 8)
        top_past = sorted(np.argsort(-vals[:12], kind="stable")[:4].tolist())
        assert res.indices.tolist() == top_past + [12, 13, 14, 15]
        assert res.provenance.count("recent") == 4

    def test_dominates_ties(self):
        # all VaN equal to the max: forced tokens must still win
        res = combine_select([3], ScoreMap(np.ones(8), G22), [4, 5, 6, 7], 5)
        assert res.indices.tolist() == [3, 4, 5, 6, 7]

    def test_overlap_rejected(self):
        with pytest.raises(ConfigError):
            combine_select([4], ScoreMap(np.ones(8), G22), [4, 5, 6, 7], 5)

    def test_random_vs_literal_oracle(self, rng):
        g = FrameGeometry.from_grid(2, 4)
        keys, values = rng.standard_normal((2, 48, 4)), rng.standard_normal((2, 48, 4))
        cfg = BudgetConfig(48, 24, 1, 0.5)
        res = infinipot_select(
            keys, values, g, target=24, recent_frames=1, tar_budget=12, pooling=PoolingConfig()
        )
        assert res.indices.tolist() == oracle_combined_select([keys], [values], cfg, g)[0]

    @given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 3))
    def test_invariants(self, seed, f, r):
        rng = np.random.default_rng(seed)
        if r >= f:
            return
        n = f * 4
        target = int(rng.integers(r * 4, n + 1))
        tar_budget = int(rng.integers(r * 4, target + 1))
        res = infinipot_select(
            rng.standard_normal((2, n, 3)),
            rng.random((2, n, 3)),
            G22,
            target=target,
            recent_frames=r,
            tar_budget=tar_budget,
            pooling=PoolingConfig(),
        )
        idx = res.indices
        assert idx.size == target and np.unique(idx).size == target
        assert (np.diff(idx) > 0).all()
        assert set(recent_indices(n, G22, r)) <= set(idx)
        assert (res.tags[np.isin(idx, recent_indices(n, G22, r))] == Provenance.RECENT).all()
        assert (res.tags == Provenance.TAR).sum() == tar_budget - r * 4
