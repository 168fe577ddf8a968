"""Residual pyramid quantizer: pooling featurizer, encode/decode, codebook fitting."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from starlite.nn.rng import make_rng
from starlite.tokenizer import (
    Codebook,
    PatchFeaturizer,
    ScaleSchedule,
    TokenPyramid,
    TokenizerConfig,
    decode,
    encode,
    fit_codebook,
    next_scale_input,
    resize_area,
    resize_bilinear,
)


@pytest.fixture(scope="module")
def featurizer():
    return PatchFeaturizer()


@pytest.fixture(scope="module")
def schedule():
    return ScaleSchedule.geometric(8)


@pytest.fixture(scope="module")
def gaussian_codebook(schedule):
    rng = make_rng(11, "fit-set")
    maps = [rng.normal(0, 1, (8, 8, 16)).astype(np.float32) for _ in range(150)]
    return fit_codebook(maps, 64, seed=5, schedule=schedule)


class TestSchedule:
    def test_geometric_defaults(self):
        s = ScaleSchedule.geometric(8)
        assert s.sides == ((1, 1), (2, 2), (3, 3), (4, 4), (6, 6), (8, 8))
        assert s.total_tokens == 1 + 4 + 9 + 16 + 36 + 64

    def test_must_start_at_one(self):
        with pytest.raises(ValueError):
            ScaleSchedule(((2, 2), (4, 4)))

    def test_nondecreasing(self):
        with pytest.raises(ValueError):
            ScaleSchedule(((1, 1), (4, 4), (2, 2)))

    def test_prefix_extends(self):
        full = ScaleSchedule.geometric(8)
        assert full.extends(ScaleSchedule.geometric(4))


class TestResize:
    @given(st.sampled_from([(8, 1), (8, 2), (8, 3), (8, 6), (4, 3), (6, 4)]))
    def test_area_rows_sum_to_one(self, pair):
        from starlite.tokenizer import _area_weights

        w = _area_weights(pair[0], pair[1])
        np.testing.assert_allclose(w.sum(axis=1), np.ones(pair[1]), atol=1e-6)

    def test_bilinear_identity(self):
        x = make_rng(0, "rs").normal(0, 1, (4, 4, 3)).astype(np.float32)
        np.testing.assert_array_equal(resize_bilinear(x, (4, 4)), x)

    def test_bilinear_from_single_cell_is_constant(self):
        x = np.full((1, 1, 2), 3.5, dtype=np.float32)
        out = resize_bilinear(x, (5, 5))
        np.testing.assert_allclose(out, 3.5, atol=1e-6)

    def test_area_downsample_is_patch_mean(self):
        x = make_rng(1, "rs").normal(0, 1, (8, 8, 1)).astype(np.float32)
        out = resize_area(x, (2, 2))
        want = x.reshape(2, 4, 2, 4).mean(axis=(1, 3))
        np.testing.assert_allclose(out[..., 0], want, atol=1e-6)


class TestExtractFeatures:
    def test_constant_image_gives_identical_cells(self, featurizer):
        img = np.full((32, 32, 3), 0.2, dtype=np.float32)
        f = featurizer.extract(img)
        np.testing.assert_allclose(f, np.broadcast_to(f[0, 0], f.shape), atol=1e-6)

    def test_shape_for_16px(self, featurizer):
        f = featurizer.extract(np.zeros((16, 16, 3), dtype=np.float32))
        assert f.shape == (4, 4, 16)

    def test_indivisible_resolution_rejected(self, featurizer):
        with pytest.raises(ValueError):
            featurizer.extract(np.zeros((18, 18, 3), dtype=np.float32))

    def test_matches_loop_pooling_oracle(self, featurizer):
        rng = make_rng(2, "img")
        img = rng.uniform(-1, 1, (16, 16, 3)).astype(np.float32)
        got = featurizer.extract(img)
        cfg = featurizer.config
        for ci in range(4):
            for cj in range(4):
                cell = []
                for si in range(2):
                    for sj in range(2):
                        r0, c0 = ci * 4 + si * 2, cj * 4 + sj * 2
                        block = img[r0 : r0 + 2, c0 : c0 + 2]
                        cell.extend(block.reshape(4, 3).mean(axis=0))
                want = np.asarray(cell, dtype=np.float32) @ featurizer.proj
                np.testing.assert_allclose(got[ci, cj], want, atol=1e-5)

    def test_reconstruct_recovers_in_range_features(self, featurizer):
        rng = make_rng(3, "img")
        img = rng.uniform(-1, 1, (32, 32, 3)).astype(np.float32)
        f = featurizer.extract(img)
        f2 = featurizer.extract(featurizer.reconstruct(f))
        np.testing.assert_allclose(f2, f, atol=1e-4)


class TestEncode:
    def test_scalar_nearest_neighbor(self):
        cb = Codebook(np.array([[-1.0], [0.0], [1.0]]))
        sched = ScaleSchedule(((1, 1),))
        pyr, norms = encode(np.full((1, 1, 1), 0.7, dtype=np.float32), cb, sched)
        assert pyr.maps[0][0, 0] == 2
        assert abs(norms[0] - 0.3) < 1e-6

    def test_zero_features_zero_tokens(self, schedule):
        cb = Codebook(np.concatenate([np.zeros((1, 16)), make_rng(4, "cb").normal(1, 1, (7, 16))]))
        pyr, norms = encode(np.zeros((8, 8, 16), dtype=np.float32), cb, schedule)
        for m in pyr.maps:
            assert np.all(m == 0)
        np.testing.assert_array_equal(norms, np.zeros(6, dtype=np.float32))

    def test_two_scale_direct_recomputation(self):
        rng = make_rng(5, "f")
        sched = ScaleSchedule(((1, 1), (2, 2)))
        cb = Codebook(rng.normal(0, 1, (8, 3)).astype(np.float32))
        f = rng.normal(0, 1, (2, 2, 3)).astype(np.float32)
        pyr, norms = encode(f, cb, sched)
        res = f.copy()
        for s, (h, w) in enumerate(sched.sides):
            down = resize_area(res, (h, w))
            flat = down.reshape(-1, 3)
            idx = np.array([np.argmin(((flat[i] - cb.vectors) ** 2).sum(axis=1)) for i in range(len(flat))])
            np.testing.assert_array_equal(pyr.maps[s].reshape(-1), idx)
            res = res - resize_bilinear(cb.vectors[idx.reshape(h, w)], (2, 2))
            assert abs(norms[s] - np.sqrt((res.astype(np.float64) ** 2).sum())) < 1e-5
        assert norms[1] <= norms[0] + 1e-6

    def test_ties_take_lowest_index(self):
        cb = Codebook(np.array([[1.0], [-1.0]]))
        pyr, _ = encode(np.zeros((1, 1, 1), dtype=np.float32), cb, ScaleSchedule(((1, 1),)))
        assert pyr.maps[0][0, 0] == 0

    def test_empty_codebook_rejected(self):
        with pytest.raises(ValueError):
            Codebook(np.zeros((0, 4)))


class TestDecode:
    def test_residual_bookkeeping_identity(self, schedule, gaussian_codebook):
        rng = make_rng(6, "f")
        for _ in range(20):
            f = rng.normal(0, 1, (8, 8, 16)).astype(np.float32)
            pyr, norms = encode(f, gaussian_codebook, schedule)
            resid = f - decode(pyr, gaussian_codebook, schedule)
            assert abs(np.sqrt((resid.astype(np.float64) ** 2).sum()) - norms[-1]) < 1e-5

    def test_exact_hit_perfect_reconstruction(self):
        cb = Codebook(np.array([[0.5, -0.25], [2.0, 1.0]]))
        sched = ScaleSchedule(((1, 1),))
        f = np.array([[[2.0, 1.0]]], dtype=np.float32)
        pyr, norms = encode(f, cb, sched)
        np.testing.assert_array_equal(decode(pyr, cb, sched), f)
        assert norms[0] == 0.0

    def test_mse_decreases_with_more_scales(self, schedule, gaussian_codebook):
        rng = make_rng(7, "f")
        f = rng.normal(0, 1, (8, 8, 16)).astype(np.float32)
        pyr, _ = encode(f, gaussian_codebook, schedule)
        mses = []
        for s in range(1, 7):
            rec = np.zeros_like(f)
            for m in pyr.maps[:s]:
                rec += resize_bilinear(gaussian_codebook.vectors[m], (8, 8))
            mses.append(float(((f - rec) ** 2).mean()))
        assert all(b < a for a, b in zip(mses, mses[1:]))

    def test_out_of_range_token_rejected(self, schedule, gaussian_codebook):
        maps = tuple(np.zeros((h, w), dtype=np.int32) for h, w in schedule.sides)
        maps[0][0, 0] = gaussian_codebook.size
        with pytest.raises(ValueError):
            decode(TokenPyramid(maps), gaussian_codebook, schedule)


class TestMonotonicity:
    @given(seed=st.integers(0, 500))
    def test_reported_norms_nonincreasing(self, schedule, gaussian_codebook, seed):
        f = make_rng(seed, "mono").normal(0, 1, (8, 8, 16)).astype(np.float32)
        _, norms = encode(f, gaussian_codebook, schedule)
        assert np.all(np.diff(norms) <= 1e-6)

    @given(seed=st.integers(0, 500))
    def test_token_range(self, schedule, gaussian_codebook, seed):
        f = make_rng(seed, "rng").normal(0, 2, (8, 8, 16)).astype(np.float32)
        pyr, _ = encode(f, gaussian_codebook, schedule)
        flat = pyr.flat_tokens()
        assert flat.min() >= 0 and flat.max() < gaussian_codebook.size


class TestIdempotence:
    def test_reencode_recovers_pyramid(self):
        cb = Codebook(np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]))
        sched = ScaleSchedule(((1, 1), (2, 2)))
        pyr = TokenPyramid((np.array([[3]]), np.array([[1, 2], [2, 1]])))
        f = decode(pyr, cb, sched)
        pyr2, norms = encode(f, cb, sched)
        for a, b in zip(pyr.maps, pyr2.maps):
            np.testing.assert_array_equal(a, b)
        assert norms[-1] == 0.0


class TestFitCodebook:
    def test_single_centroid_is_mean(self):
        rng = make_rng(8, "fit")
        sched = ScaleSchedule(((1, 1),))
        maps = [rng.normal(0, 1, (1, 1, 4)).astype(np.float32) for _ in range(30)]
        cb = fit_codebook(maps, 1, seed=0, schedule=sched)
        want = np.stack([m[0, 0] for m in maps]).mean(axis=0)
        np.testing.assert_allclose(cb.vectors[0], want, atol=1e-5)

    def test_two_clusters_recovered(self):
        rng = make_rng(9, "fit")
        sched = ScaleSchedule(((1, 1),))
        a = [(rng.normal(0, 0.01, 4) + np.array([3, 3, 3, 3])).astype(np.float32) for _ in range(40)]
        b = [(rng.normal(0, 0.01, 4) + np.array([-3, -3, -3, -3])).astype(np.float32) for _ in range(40)]
        maps = [v.reshape(1, 1, 4) for v in a + b]
        cb = fit_codebook(maps, 2, seed=1, schedule=sched)
        means = sorted([np.stack(a).mean(axis=0)[0], np.stack(b).mean(axis=0)[0]])
        got = sorted(cb.vectors[:, 0])
        np.testing.assert_allclose(got, means, atol=1e-3)

    def test_same_seed_identical(self, schedule):
        rng = make_rng(10, "fit")
        maps = [rng.normal(0, 1, (8, 8, 16)).astype(np.float32) for _ in range(50)]
        cb1 = fit_codebook(maps, 32, seed=2, schedule=schedule)
        cb2 = fit_codebook(maps, 32, seed=2, schedule=schedule)
        np.testing.assert_array_equal(cb1.vectors, cb2.vectors)

    def test_no_duplicate_vectors(self, gaussian_codebook):
        assert len(np.unique(gaussian_codebook.vectors, axis=0)) == gaussian_codebook.size

    def test_too_few_distinct_samples(self):
        sched = ScaleSchedule(((1, 1),))
        maps = [np.zeros((1, 1, 4), dtype=np.float32) for _ in range(10)]
        with pytest.raises(ValueError):
            fit_codebook(maps, 4, seed=0, schedule=sched)


class TestNextScaleInput:
    def test_zero_prefix_gives_zero_map(self, schedule):
        cb = Codebook(np.concatenate([np.zeros((1, 16)), make_rng(12, "cb").normal(0, 1, (3, 16))]))
        pyr = TokenPyramid(tuple(np.zeros((h, w), dtype=np.int32) for h, w in schedule.sides))
        out = next_scale_input(pyr, cb, schedule, 2)
        np.testing.assert_array_equal(out, np.zeros((2, 2, 16), dtype=np.float32))

    def test_shape(self):
        sched = ScaleSchedule(((1, 1), (2, 2), (4, 4)))
        cb = Codebook(make_rng(13, "cb").normal(0, 1, (5, 16)))
        pyr = TokenPyramid((np.zeros((1, 1), np.int32), np.zeros((2, 2), np.int32), np.zeros((4, 4), np.int32)))
        assert next_scale_input(pyr, cb, sched, 3).shape == (4, 4, 16)

    def test_matches_decode_then_resample(self, schedule, gaussian_codebook):
        rng = make_rng(14, "f")
        f = rng.normal(0, 1, (8, 8, 16)).astype(np.float32)
        pyr, _ = encode(f, gaussian_codebook, schedule)
        for s in range(2, 7):
            got = next_scale_input(pyr, gaussian_codebook, schedule, s)
            full = np.zeros((8, 8, 16), dtype=np.float32)
            for m in pyr.maps[: s - 1]:
                full += resize_bilinear(gaussian_codebook.vectors[m], (8, 8))
            want = resize_bilinear(full, schedule.sides[s - 1])
            np.testing.assert_allclose(got, want, atol=1e-6)

    def test_scale_out_of_range(self, schedule, gaussian_codebook):
        pyr = TokenPyramid(tuple(np.zeros((h, w), dtype=np.int32) for h, w in schedule.sides))
        with pytest.raises(ValueError):
            next_scale_input(pyr, gaussian_codebook, schedule, 1)
        with pytest.raises(ValueError):
            next_scale_input(pyr, gaussian_codebook, schedule, 7)
