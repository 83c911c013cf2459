"""Patch-noise injection, cross-attention pooling and the fusion projection."""

import numpy as np
import pytest

from cmdret import autodiff as ad
from cmdret.autodiff import Tensor
from cmdret.encoders import ModelConfig, build_param_store
from cmdret.errors import BatchSizeError, ConfigError, ShapeError
from cmdret.fusion import (
    NoiseSpec,
    cross_attend,
    denoise_batch,
    fuse_project,
    inject_patch_noise,
    replaced_count,
)
from cmdret.gradcheck import finite_diff_check


def _patches(b=3, n=5, e=8, seed=0):
    return np.random.default_rng(seed).normal(size=(b, n, e))


class TestInjectPatchNoise:
    def test_zero_ratio_is_identity(self):
        patches = _patches()
        out = inject_patch_noise(patches, NoiseSpec(ratio=0.0, rng_seed=1))
        np.testing.assert_array_equal(out.patches, patches)
        assert not out.replaced_mask.any()
        assert (out.donor_index == -1).all()

    def test_thirty_percent_of_ten_replaces_exactly_three(self):
        patches = _patches(b=4, n=10)
        out = inject_patch_noise(patches, NoiseSpec(ratio=0.30, rng_seed=2))
        np.testing.assert_array_equal(out.replaced_mask.sum(axis=1), [3, 3, 3, 3])

    def test_round_half_up(self):
        assert replaced_count(0.30, 10) == 3
        assert replaced_count(0.25, 10) == 3  # 2.5 rounds up
        assert replaced_count(0.30, 5) == 2  # 1.5 rounds up
        assert replaced_count(0.0, 10) == 0

    def test_single_item_batch_rejected(self):
        with pytest.raises(BatchSizeError, match="donor"):
            inject_patch_noise(_patches(b=1), NoiseSpec(ratio=0.3, rng_seed=0))

    def test_bad_ratio_rejected(self):
        with pytest.raises(ConfigError):
            NoiseSpec(ratio=1.0, rng_seed=0)
        with pytest.raises(ConfigError):
            NoiseSpec(ratio=-0.1, rng_seed=0)

    def test_two_item_batch_replacements_come_from_the_other_item(self):
        patches = _patches(b=2, n=6, seed=3)
        out = inject_patch_noise(patches, NoiseSpec(ratio=0.5, rng_seed=4))
        for i, other in ((0, 1), (1, 0)):
            for pos in np.flatnonzero(out.replaced_mask[i]):
                row = out.patches[i, pos]
                member = any(np.array_equal(row, patches[other, j]) for j in range(6))
                assert member, f"replaced patch ({i},{pos}) not found in item {other}"

    def test_unreplaced_patches_bit_identical(self):
        patches = _patches(b=3, n=8, seed=5)
        out = inject_patch_noise(patches, NoiseSpec(ratio=0.25, rng_seed=6))
        keep = ~out.replaced_mask
        for i in range(3):
            np.testing.assert_array_equal(out.patches[i][keep[i]], patches[i][keep[i]])

    def test_deterministic_given_seed(self):
        patches = _patches(b=4, n=9, seed=7)
        a = inject_patch_noise(patches, NoiseSpec(ratio=0.4, rng_seed=8))
        b = inject_patch_noise(patches, NoiseSpec(ratio=0.4, rng_seed=8))
        np.testing.assert_array_equal(a.patches, b.patches)
        np.testing.assert_array_equal(a.replaced_mask, b.replaced_mask)
        np.testing.assert_array_equal(a.donor_index, b.donor_index)
        c = inject_patch_noise(patches, NoiseSpec(ratio=0.4, rng_seed=9))
        assert not np.array_equal(a.patches, c.patches)

    def test_donor_exclusion_over_many_seeds(self):
        patches = _patches(b=5, n=10, seed=10)
        for seed in range(100):
            out = inject_patch_noise(patches, NoiseSpec(ratio=0.3, rng_seed=seed))
            np.testing.assert_array_equal(out.replaced_mask.sum(axis=1), [3] * 5)
            for i in range(5):
                donors = out.donor_index[i][out.replaced_mask[i], 0]
                assert np.all(donors != i)
                assert np.all(donors >= 0)


class TestCrossAttend:
    def test_single_patch_dominates_regardless_of_query(self):
        rng = np.random.default_rng(11)
        patches = rng.normal(size=(2, 1, 6))
        noisy = inject_patch_noise(patches, NoiseSpec(ratio=0.0, rng_seed=0))
        queries = Tensor(rng.normal(size=(2, 6)))
        out = cross_attend(queries, noisy)
        np.testing.assert_allclose(out.data, patches[:, 0, :], atol=1e-14)

    def test_identical_patches_collapse_to_that_vector(self):
        rng = np.random.default_rng(12)
        v = rng.normal(size=6)
        patches = np.tile(v, (2, 4, 1))
        noisy = inject_patch_noise(patches, NoiseSpec(ratio=0.0, rng_seed=0))
        out = cross_attend(Tensor(rng.normal(size=(2, 6))), noisy)
        np.testing.assert_allclose(out.data, np.tile(v, (2, 1)), atol=1e-12)

    def test_matches_brute_force_attention(self):
        rng = np.random.default_rng(13)
        b, n, e = 3, 5, 8
        patches = rng.normal(size=(b, n, e))
        queries = rng.normal(size=(b, e))
        noisy = inject_patch_noise(patches, NoiseSpec(ratio=0.2, rng_seed=14))
        out = cross_attend(Tensor(queries), noisy).data

        expected = np.zeros((b, e))
        for i in range(b):
            scores = np.array(
                [queries[i] @ noisy.patches[i, j] / np.sqrt(e) for j in range(n)]
            )
            w = np.exp(scores - scores.max())
            w /= w.sum()
            expected[i] = sum(w[j] * noisy.patches[i, j] for j in range(n))
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_attended_vector_in_convex_hull(self):
        rng = np.random.default_rng(15)
        patches = rng.uniform(-1.0, 2.0, size=(4, 6, 5))
        noisy = inject_patch_noise(patches, NoiseSpec(ratio=0.3, rng_seed=16))
        out = cross_attend(Tensor(rng.normal(size=(4, 5))), noisy).data
        lo = noisy.patches.min(axis=1) - 1e-12
        hi = noisy.patches.max(axis=1) + 1e-12
        assert np.all(out >= lo) and np.all(out <= hi)

    def test_dimension_mismatch(self):
        patches = _patches(b=2, n=3, e=6)
        noisy = inject_patch_noise(patches, NoiseSpec(ratio=0.0, rng_seed=0))
        with pytest.raises(ShapeError):
            cross_attend(Tensor(np.zeros((2, 5))), noisy)


class TestFuseProject:
    def _zeroed_store(self, e=8):
        cfg = ModelConfig(speech_dim=8, shared_dim=e, feature_layers=3, heads=8)
        store = build_param_store(cfg, seed=0)
        store["fusion.fc_weight"].data = np.zeros((e, e))
        store["fusion.fc_bias"].data = np.zeros(e)
        store["fusion.ln_gamma"].data = np.ones(e)
        store["fusion.ln_beta"].data = np.zeros(e)
        return store

    def test_zero_fc_reduces_to_normalized_layer_norm(self):
        rng = np.random.default_rng(17)
        store = self._zeroed_store()
        a = rng.normal(size=(3, 8))
        out = fuse_project(Tensor(a), store).data
        mu = a.mean(axis=1, keepdims=True)
        var = ((a - mu) ** 2).mean(axis=1, keepdims=True)
        ln = (a - mu) / np.sqrt(var + ad.LAYER_NORM_EPS)
        expected = ln / np.linalg.norm(ln, axis=1, keepdims=True)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_rows_unit_norm(self):
        rng = np.random.default_rng(18)
        cfg = ModelConfig(speech_dim=8, shared_dim=8, feature_layers=3, heads=8)
        store = build_param_store(cfg, seed=1)
        out = fuse_project(Tensor(rng.normal(size=(5, 8))), store).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)

    def test_gradients_wrt_fusion_params(self):
        rng = np.random.default_rng(19)
        cfg = ModelConfig(speech_dim=8, shared_dim=8, feature_layers=3, heads=8)
        store = build_param_store(cfg, seed=2)
        a = rng.normal(size=(4, 8))
        probe = rng.normal(size=(4, 8))
        fusion_params = {n: p for n, p in store.items() if n.startswith("fusion.")}
        report = finite_diff_check(
            lambda p: ad.sum_all(ad.mul(fuse_project(Tensor(a), store), ad.as_tensor(probe))),
            fusion_params,
            h=1e-5,
            tol=1e-4,
        )
        assert report.passed, report.summary_lines()


class TestPathEquivalence:
    def test_zero_noise_path_equals_clean_pooled_path(self):
        rng = np.random.default_rng(20)
        cfg = ModelConfig(speech_dim=8, shared_dim=8, feature_layers=3, heads=8)
        store = build_param_store(cfg, seed=3)
        patches = rng.normal(size=(3, 6, 8))
        queries = Tensor(rng.normal(size=(3, 8)))

        via_noise = denoise_batch(queries, patches, NoiseSpec(ratio=0.0, rng_seed=9), store)
        clean = inject_patch_noise(patches, NoiseSpec(ratio=0.0, rng_seed=123))
        via_clean = fuse_project(cross_attend(queries, clean), store)
        np.testing.assert_array_equal(via_noise.data, via_clean.data)
