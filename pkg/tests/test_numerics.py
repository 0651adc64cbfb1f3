import numpy as np
import pytest

from ovpanseg.numerics import (AttnWeights, bilinear_resize, conv2d_forward,
                               deconv2d_forward, kmeans, kmeans_inertia,
                               layer_norm, multi_head_attention, nearest_resize,
                               softmax)

from oracles import (bilinear_resize_loop, conv2d_loop, deconv2d_loop,
                     layer_norm_rows, mha_loop, softmax_rows_64)


def rand_attn_weights(rng, d, heads, dtype=np.float64):
    def w():
        return rng.standard_normal((d, d)).astype(dtype) / np.sqrt(d)

    def b():
        return rng.standard_normal(d).astype(dtype) * 0.1

    return AttnWeights(wq=w(), wk=w(), wv=w(), wo=w(),
                       bq=b(), bk=b(), bv=b(), bo=b(), n_heads=heads)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(np.array([0.0, 0.0]), axis=-1, temperature=1.0)
        assert np.allclose(out, [0.5, 0.5])

    def test_analytic(self):
        out = softmax(np.array([np.log(2.0), 0.0]), axis=-1)
        assert np.allclose(out, [2 / 3, 1 / 3], atol=1e-12)

    def test_seeded_matches_float64_recompute(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 7)).astype(np.float32)
        out = softmax(x, axis=-1, temperature=0.07)
        ref = softmax_rows_64(x, temperature=0.07)
        assert np.allclose(out, ref, atol=1e-5)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert np.array_equal(out.argmax(axis=-1), x.argmax(axis=-1))

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((5, 6))
        shifted = softmax(x + 3.7, axis=-1)
        assert np.allclose(shifted, softmax(x, axis=-1), atol=1e-6)

    def test_order_preserving(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(9)
        out = softmax(x, axis=-1, temperature=0.3)
        assert np.array_equal(np.argsort(out), np.argsort(x))

    def test_neg_inf_gets_zero_weight(self):
        out = softmax(np.array([1.0, -np.inf, 2.0]), axis=-1)
        assert out[1] == 0.0
        assert np.isclose(out.sum(), 1.0)

    def test_rejects_nan_and_posinf(self):
        with pytest.raises(ValueError):
            softmax(np.array([1.0, np.nan]))
        with pytest.raises(ValueError):
            softmax(np.array([1.0, np.inf]))

    def test_rejects_all_neg_inf_slice(self):
        with pytest.raises(ValueError):
            softmax(np.array([-np.inf, -np.inf]))

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            softmax(np.array([1.0, 2.0]), temperature=0.0)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = np.full((1, 6), 3.3)
        out = layer_norm(x, np.ones(6), np.zeros(6))
        assert np.allclose(out, 0.0)

    def test_already_normalized(self):
        out = layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=1e-12)
        assert np.allclose(out, [[1.0, -1.0]], atol=1e-9)

    def test_seeded_matches_two_pass_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 8))
        gain = rng.standard_normal(8)
        bias = rng.standard_normal(8)
        assert np.allclose(layer_norm(x, gain, bias), layer_norm_rows(x, gain, bias),
                           atol=1e-12)

    def test_row_statistics(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((5, 16)) * 4 + 2
        out = layer_norm(x, np.ones(16), np.zeros(16))
        assert np.abs(out.mean(axis=-1)).max() < 1e-5
        assert np.abs(out.var(axis=-1) - 1).max() < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            layer_norm(np.zeros((2, 4)), np.ones(3), np.zeros(3))


class TestAttention:
    def test_single_key_returns_its_value_projection(self):
        rng = np.random.default_rng(20)
        d = 8
        w = rand_attn_weights(rng, d, 2)
        q = rng.standard_normal((3, d))
        k = rng.standard_normal((1, d))
        out = multi_head_attention(q, k, k, w, np.ones((3, 1), dtype=bool))
        expected = ((k @ w.wv + w.bv) @ w.wo + w.bo)
        assert np.allclose(out, np.repeat(expected, 3, axis=0))

    def test_equidistant_keys_average_values(self):
        d = 4
        eye = np.eye(d)
        zero = np.zeros(d)
        w = AttnWeights(wq=eye, wk=eye, wv=eye, wo=eye,
                        bq=zero, bk=zero, bv=zero, bo=zero, n_heads=1)
        q = np.array([[1.0, 0.0, 0.0, 0.0]])
        k = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])  # both orthogonal to q
        out = multi_head_attention(q, k, k, w)
        assert np.allclose(out, k.mean(axis=0, keepdims=True))

    def test_seeded_matches_loop_oracle(self):
        rng = np.random.default_rng(21)
        d, heads = 8, 2
        w = rand_attn_weights(rng, d, heads)
        q = rng.standard_normal((4, d))
        k = rng.standard_normal((6, d))
        v = rng.standard_normal((6, d))
        mask = rng.random((4, 6)) < 0.6
        out = multi_head_attention(q, k, v, w, mask)
        ref = mha_loop(q, k, v, w.wq, w.wk, w.wv, w.wo, w.bq, w.bk, w.bv, w.bo,
                       heads, mask)
        assert np.abs(out - ref).max() < 1e-5

    def test_all_true_mask_equals_no_mask(self):
        rng = np.random.default_rng(22)
        d = 16
        w = rand_attn_weights(rng, d, 4)
        q = rng.standard_normal((5, d))
        k = rng.standard_normal((7, d))
        v = rng.standard_normal((7, d))
        a = multi_head_attention(q, k, v, w, np.ones((5, 7), dtype=bool))
        b = multi_head_attention(q, k, v, w)
        assert np.array_equal(a, b)

    def test_blocked_keys_get_zero_weight(self):
        rng = np.random.default_rng(23)
        d = 8
        w = rand_attn_weights(rng, d, 2)
        q = rng.standard_normal((2, d))
        k = rng.standard_normal((4, d))
        v = rng.standard_normal((4, d))
        mask = np.array([[True, False, True, False], [True, True, True, True]])
        out = multi_head_attention(q, k, v, w, mask)
        # replacing a blocked key's value must not change the output
        v2 = v.copy()
        v2[1] += 100.0
        out2 = multi_head_attention(q, k, v2, w, mask)
        assert np.allclose(out[0], out2[0])
        assert not np.allclose(out[1], out2[1])

    def test_fully_blocked_row_falls_back_to_unmasked(self):
        rng = np.random.default_rng(24)
        d = 8
        w = rand_attn_weights(rng, d, 2)
        q = rng.standard_normal((2, d))
        k = rng.standard_normal((3, d))
        mask = np.array([[False, False, False], [True, False, False]])
        out = multi_head_attention(q, k, k, w, mask)
        ref = multi_head_attention(q, k, k, w)
        assert np.allclose(out[0], ref[0])

    def test_head_divisibility(self):
        rng = np.random.default_rng(25)
        w = rand_attn_weights(rng, 6, 4)
        with pytest.raises(ValueError):
            multi_head_attention(np.zeros((1, 6)), np.zeros((1, 6)), np.zeros((1, 6)), w)


class TestConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(30)
        x = rng.standard_normal((1, 5, 5))
        kernel = np.ones((1, 1, 1, 1))
        assert np.allclose(conv2d_forward(x, kernel, stride=1), x)

    def test_counting_kernel(self):
        x = np.ones((1, 4, 4))
        kernel = np.ones((1, 1, 2, 2))
        out = conv2d_forward(x, kernel, stride=2)
        assert out.shape == (1, 2, 2)
        assert np.allclose(out, 4.0)

    def test_seeded_matches_loop_oracle(self):
        rng = np.random.default_rng(31)
        x = rng.standard_normal((3, 8, 8))
        kernel = rng.standard_normal((5, 3, 3, 3))
        for stride, pad in [(1, 0), (2, 1), (1, 1)]:
            out = conv2d_forward(x, kernel, stride=stride, padding=pad)
            ref = conv2d_loop(x, kernel, stride=stride, padding=pad)
            assert np.abs(out - ref).max() < 1e-10

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 2, 2)))

    def test_deconv_doubles_spatial_dims(self):
        rng = np.random.default_rng(32)
        x = rng.standard_normal((2, 3, 5))
        kernel = rng.standard_normal((4, 2, 2, 2))
        assert deconv2d_forward(x, kernel, stride=2).shape == (4, 6, 10)

    def test_deconv_matches_loop_oracle(self):
        rng = np.random.default_rng(33)
        x = rng.standard_normal((2, 4, 4))
        kernel = rng.standard_normal((3, 2, 2, 2))
        out = deconv2d_forward(x, kernel, stride=2)
        assert np.abs(out - deconv2d_loop(x, kernel, stride=2)).max() < 1e-10

    def test_conv_deconv_adjointness(self):
        rng = np.random.default_rng(34)
        x = rng.standard_normal((3, 8, 8))
        kernel = rng.standard_normal((5, 3, 2, 2))
        y = rng.standard_normal((5, 4, 4))
        fwd = conv2d_forward(x, kernel, stride=2)
        back = deconv2d_forward(y, kernel.transpose(1, 0, 2, 3), stride=2)
        assert abs(np.sum(fwd * y) - np.sum(x * back)) < 1e-4


class TestResize:
    def test_constant_stays_constant(self):
        x = np.full((1, 3, 5), 5.0)
        for shape in [(7, 7), (2, 9), (1, 1)]:
            assert np.allclose(bilinear_resize(x, *shape), 5.0)

    def test_same_size_is_identity(self):
        rng = np.random.default_rng(40)
        x = rng.standard_normal((2, 6, 4))
        assert np.array_equal(bilinear_resize(x, 6, 4), x)

    def test_2x2_to_4x4_closed_form(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = bilinear_resize(x[None], 4, 4)[0]
        ref = bilinear_resize_loop(x, 4, 4)
        assert np.allclose(out, ref, atol=1e-12)

    def test_seeded_matches_loop(self):
        rng = np.random.default_rng(41)
        x = rng.standard_normal((5, 7))
        out = bilinear_resize(x[None], 11, 3)[0]
        assert np.allclose(out, bilinear_resize_loop(x, 11, 3), atol=1e-12)

    def test_align_corners_endpoints(self):
        x = np.array([[0.0, 3.0]])
        out = bilinear_resize(x[None], 1, 4, align_corners=True)[0]
        assert np.allclose(out, [[0.0, 1.0, 2.0, 3.0]])

    def test_nearest_replicates_blocks(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((1, 2, 2))
        out = nearest_resize(x, 4, 4)
        assert np.array_equal(out[0], np.repeat(np.repeat(x[0], 2, 0), 2, 1))


class TestKmeans:
    def test_two_separated_pairs(self):
        pts = np.array([[0.0, 0.0], [0.2, 0.0], [10.0, 10.0], [10.2, 10.0]])
        assign, cents = kmeans(pts, 2, seed=0)
        assert assign[0] == assign[1] and assign[2] == assign[3]
        assert assign[0] != assign[2]
        got = {tuple(np.round(c, 6)) for c in cents}
        assert got == {(0.1, 0.0), (10.1, 10.0)}

    def test_k_equals_n(self):
        rng = np.random.default_rng(50)
        pts = rng.standard_normal((6, 3))
        assign, cents = kmeans(pts, 6, seed=1)
        assert sorted(assign.tolist()) == list(range(6))
        assert kmeans_inertia(pts, assign, cents) < 1e-20

    def test_seeded_blobs_beat_generator_centroids(self):
        rng = np.random.default_rng(51)
        true_cents = np.array([[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]])
        labels = np.repeat(np.arange(3), 20)
        pts = true_cents[labels] + 0.4 * rng.standard_normal((60, 2))
        assign, cents = kmeans(pts, 3, seed=7)
        inertia = kmeans_inertia(pts, assign, cents)
        true_assign = np.argmin(
            ((pts[:, None, :] - true_cents[None]) ** 2).sum(-1), axis=1)
        true_inertia = kmeans_inertia(pts, true_assign, true_cents)
        assert inertia <= true_inertia

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(52)
        pts = rng.standard_normal((30, 4))
        a1, c1 = kmeans(pts, 4, seed=3)
        a2, c2 = kmeans(pts, 4, seed=3)
        assert np.array_equal(a1, a2) and np.array_equal(c1, c2)

    def test_inertia_monotone_non_increasing(self):
        rng = np.random.default_rng(53)
        pts = rng.standard_normal((40, 3))
        prev = None
        for iters in range(1, 12):
            assign, cents = kmeans(pts, 5, seed=9, max_iters=iters)
            inertia = kmeans_inertia(pts, assign, cents)
            if prev is not None:
                assert inertia <= prev + 1e-9
            prev = inertia

    def test_k_exceeds_n(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4)
