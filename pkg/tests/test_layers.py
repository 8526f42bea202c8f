import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvclient import autodiff as ad
from pvclient.autodiff import ShapeError, Tensor
from pvclient.gradcheck import gradcheck
from pvclient.layers import (
    AffineParams,
    EncoderBlockParams,
    FfnParams,
    LayerNormParams,
    MhaParams,
    RevInParams,
    cross_variable_attention,
    encoder_block,
    layer_norm,
    linear_trend,
    named_tensors,
    optional_embedding,
    projection_head,
    revin_denormalize,
    revin_normalize,
)

TOL = 1e-4


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def _named(record):
    tensors = []
    for name, t in named_tensors(record):
        t.name = name
        tensors.append(t)
    return tensors


class TestRevIn:
    def test_standardized_input_unchanged(self, rng):
        x = rng.normal(size=(64, 2))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        O, _ = revin_normalize(Tensor(x), RevInParams.init(2))
        np.testing.assert_allclose(O.data, x, rtol=1e-5, atol=1e-12)

    def test_constant_channel_maps_to_beta(self, rng):
        params = RevInParams.init(2)
        params.beta.data[:] = [0.3, -0.7]
        H = np.column_stack([np.full(10, 4.0), rng.normal(size=10)])
        O, stats = revin_normalize(Tensor(H), params)
        np.testing.assert_allclose(O.data[:, 0], 0.3, atol=1e-12)
        assert np.all(stats.sigma.data > 0)

    def test_statistics_of_output(self, rng):
        H = rng.normal(3.0, 5.0, size=(192, 6))
        O, _ = revin_normalize(Tensor(H), RevInParams.init(6))
        np.testing.assert_allclose(O.data.mean(axis=0), 0.0, atol=1e-6)
        # eps inside the sqrt shrinks the std by a factor sqrt(var / (var + eps))
        expected = np.sqrt(H.var(axis=0) / (H.var(axis=0) + 1e-5))
        np.testing.assert_allclose(O.data.std(axis=0), expected, atol=1e-12)
        np.testing.assert_allclose(O.data.std(axis=0), 1.0, atol=1e-6)

    def test_round_trip(self, rng):
        H = Tensor(rng.normal(size=(48, 4)))
        params = RevInParams.init(4)
        O, stats = revin_normalize(H, params)
        back = revin_denormalize(O, params, stats, [0, 1, 2, 3])
        np.testing.assert_allclose(back.data, H.data, atol=1e-6)

    def test_beta_is_fixed_point(self, rng):
        params = RevInParams.init(3)
        params.alpha.data[:] = [0.7, 1.5, 2.0]
        params.beta.data[:] = [0.1, -0.2, 0.5]
        H = Tensor(rng.normal(size=(20, 3)))
        _, stats = revin_normalize(H, params)
        F = Tensor(np.tile(params.beta.data, (5, 1)))
        out = revin_denormalize(F, params, stats, [0, 1, 2])
        np.testing.assert_allclose(out.data, np.tile(stats.mu.data, (5, 1)), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_random_affine(self, seed):
        r = np.random.default_rng(seed)
        params = RevInParams.init(6)
        params.alpha.data[:] = r.uniform(0.5, 2.0, 6)
        params.beta.data[:] = r.uniform(0.5, 2.0, 6)
        H = Tensor(r.normal(r.uniform(-5, 5, 6), r.uniform(0.1, 10, 6), size=(192, 6)))
        O, stats = revin_normalize(H, params)
        assert np.max(np.abs(revin_denormalize(O, params, stats, range(6)).data - H.data)) < 1e-6

    def test_single_series_uses_mapped_channel(self, rng):
        params = RevInParams.init(3)
        H = Tensor(rng.normal([0, 10, -5], [1, 2, 3], size=(2, 30, 3)))
        O, stats = revin_normalize(H, params)
        series = ad.take(O, 1, axis=-1)  # (2, 30)
        np.testing.assert_allclose(revin_denormalize(series, params, stats, [1]).data, H.data[..., 1], atol=1e-9)

    def test_denormalize_without_stats(self):
        with pytest.raises(ValueError, match="before revin_normalize"):
            revin_denormalize(Tensor(np.zeros(4)), RevInParams.init(1), None, [0])

    def test_denormalize_zero_alpha(self, rng):
        params = RevInParams.init(2)
        _, stats = revin_normalize(Tensor(rng.normal(size=(8, 2))), params)
        params.alpha.data[1] = 0.0
        with pytest.raises(ValueError, match="alpha"):
            revin_denormalize(Tensor(np.zeros(4)), params, stats, [1])

    def test_gradient(self, rng):
        params = RevInParams.init(3)
        params.alpha.data[:] = rng.uniform(0.5, 2, 3)
        params.beta.data[:] = rng.uniform(-1, 1, 3)
        H = Tensor(rng.uniform(-1, 1, size=(10, 3)), requires_grad=True, name="H")
        w = Tensor(rng.normal(size=(10, 3)))

        def f():
            O, stats = revin_normalize(H, params)
            return ad.tensor_sum(ad.mul(revin_denormalize(ad.mul(O, O), params, stats, [0, 1, 2]), w))

        errs = gradcheck(f, [H, *_named(params)])
        assert max(errs.values()) < TOL


def _mha(rng, D=16, d_model=8, heads=2):
    return MhaParams.init(rng, D, d_model, heads)


class TestAttention:
    def test_zero_query_key_gives_uniform_weights(self, rng):
        p = _mha(rng)
        p.wq.data[:] = 0.0
        p.wk.data[:] = 0.0
        tokens = Tensor(rng.normal(size=(5, 16)))
        attn = []
        out = cross_variable_attention(tokens, p, attn)
        for a in attn:
            np.testing.assert_allclose(a, 0.2)
        v = tokens.data @ p.wv.data
        expected = np.tile(v.mean(axis=0), (5, 1)) @ p.wo.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_single_token(self, rng):
        p = _mha(rng)
        tokens = Tensor(rng.normal(size=(1, 16)))
        attn = []
        out = cross_variable_attention(tokens, p, attn)
        assert all(a.tolist() == [[1.0]] for a in attn)
        np.testing.assert_allclose(out.data, tokens.data @ p.wv.data @ p.wo.data, atol=1e-12)

    def test_rows_stochastic_and_gradient(self, rng):
        p = _mha(rng, D=16, d_model=8, heads=2)
        tokens = Tensor(rng.uniform(-1, 1, size=(6, 16)), requires_grad=True, name="tokens")
        attn = []
        cross_variable_attention(tokens, p, attn)
        assert len(attn) == 2
        for a in attn:
            assert np.all(a >= 0)
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
        w = Tensor(rng.normal(size=(6, 16)))
        errs = gradcheck(lambda: ad.tensor_sum(ad.mul(cross_variable_attention(tokens, p), w)), [tokens, *_named(p)])
        assert max(errs.values()) < TOL

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            cross_variable_attention(Tensor(np.zeros((3, 15))), _mha(rng))

    def test_channel_permutation_equivariance(self, rng):
        p = _mha(rng)
        tokens = rng.normal(size=(6, 16))
        perm = rng.permutation(6)
        a = cross_variable_attention(Tensor(tokens), p).data
        b = cross_variable_attention(Tensor(tokens[perm]), p).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)


def _block(rng, D=16, d_model=8, heads=2):
    return EncoderBlockParams(_mha(rng, D, d_model, heads), FfnParams.init(rng, D, d_model),
                              LayerNormParams.init(D), LayerNormParams.init(D))


class TestEncoderBlock:
    def test_zero_weights_collapse_to_double_layernorm(self, rng):
        p = _block(rng)
        for t in _named(p.mixer) + _named(p.ffn):
            t.data[:] = 0.0
        tokens = Tensor(rng.normal(size=(4, 16)))
        expected = layer_norm(layer_norm(tokens, p.norm1), p.norm2)
        np.testing.assert_allclose(encoder_block(tokens, p).data, expected.data, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 7), st.sampled_from([8, 12, 16]))
    def test_shape_preserved(self, C, D):
        r = np.random.default_rng(C * 100 + D)
        p = _block(r, D=D, d_model=8, heads=2)
        assert encoder_block(Tensor(r.normal(size=(C, D))), p).shape == (C, D)

    def test_gradient_two_blocks(self, rng):
        blocks = [_block(rng), _block(rng)]
        tokens = Tensor(rng.uniform(-1, 1, size=(3, 16)), requires_grad=True, name="tokens")
        w = Tensor(rng.normal(size=(3, 16)))

        def f():
            x = tokens
            for b in blocks:
                x = encoder_block(x, b)
            return ad.tensor_sum(ad.mul(x, w))

        errs = gradcheck(f, [tokens, *_named(blocks)])
        assert max(errs.values()) < TOL


class TestHeads:
    def test_projection_selector(self, rng):
        L, T = 8, 3
        p = AffineParams.init(rng, L, T)
        p.weight.data[:] = np.eye(L)[:, :T]
        tokens = rng.normal(size=(4, L))
        np.testing.assert_array_equal(projection_head(Tensor(tokens), p).data, tokens[:, :T].T)

    def test_projection_bias_only(self, rng):
        p = AffineParams.init(rng, 8, 3)
        p.weight.data[:] = 0.0
        p.bias.data[:] = [1.0, 2.0, 3.0]
        out = projection_head(Tensor(rng.normal(size=(4, 8))), p).data
        np.testing.assert_array_equal(out, np.tile([[1.0], [2.0], [3.0]], (1, 4)))

    def test_projection_gradient(self, rng):
        p = AffineParams.init(rng, 16, 8)
        x = Tensor(rng.uniform(-1, 1, size=(6, 16)), requires_grad=True, name="x")
        w = Tensor(rng.normal(size=(8, 6)))
        errs = gradcheck(lambda: ad.tensor_sum(ad.mul(projection_head(x, p), w)), [x, *_named(p)])
        assert max(errs.values()) < TOL

    def test_linear_trend_persistence_selector(self, rng):
        L, T = 10, 4
        p = AffineParams.init(rng, L, T)
        p.weight.data[:] = 0.0
        p.weight.data[-1, :] = 1.0
        O = rng.normal(size=(L, 3))
        np.testing.assert_array_equal(linear_trend(Tensor(O), p).data, np.tile(O[-1], (T, 1)))

    def test_linear_trend_weight_sharing(self, rng):
        p = AffineParams.init(rng, 10, 4)
        col = rng.normal(size=10)
        out = linear_trend(Tensor(np.column_stack([col, col])), p).data
        np.testing.assert_array_equal(out[:, 0], out[:, 1])

    def test_linear_trend_channel_independence(self, rng):
        p = AffineParams.init(rng, 12, 5)
        O = rng.normal(size=(12, 4))
        base = linear_trend(Tensor(O), p).data
        O2 = O.copy()
        O2[:, 2] = rng.normal(size=12)
        changed = linear_trend(Tensor(O2), p).data
        np.testing.assert_array_equal(np.delete(changed, 2, axis=1), np.delete(base, 2, axis=1))

    def test_linear_trend_gradient(self, rng):
        p = AffineParams.init(rng, 16, 8)
        O = Tensor(rng.uniform(-1, 1, size=(16, 4)), requires_grad=True, name="O")
        w = Tensor(rng.normal(size=(8, 4)))
        errs = gradcheck(lambda: ad.tensor_sum(ad.mul(linear_trend(O, p), w)), [O, *_named(p)])
        assert max(errs.values()) < TOL


class TestEmbedding:
    def test_identity_embedding_reproduces_tokens(self, rng):
        p = AffineParams.init(rng, 8, 8)
        p.weight.data[:] = np.eye(8)
        tokens = rng.normal(size=(3, 8))
        np.testing.assert_array_equal(optional_embedding(Tensor(tokens), p).data, tokens)

    def test_shape(self, rng):
        p = AffineParams.init(rng, 192, 64)
        assert optional_embedding(Tensor(rng.normal(size=(6, 192))), p).shape == (6, 64)

    def test_disabled(self):
        with pytest.raises(ValueError, match="add_embedding"):
            optional_embedding(Tensor(np.zeros((2, 4))), None)

    def test_gradient_through_embed_and_block(self, rng):
        emb = AffineParams.init(rng, 12, 16)
        block = _block(rng)
        tokens = Tensor(rng.uniform(-1, 1, size=(3, 12)), requires_grad=True, name="tokens")
        w = Tensor(rng.normal(size=(3, 16)))
        errs = gradcheck(lambda: ad.tensor_sum(ad.mul(encoder_block(optional_embedding(tokens, emb), block), w)),
                         [tokens, *_named(emb), *_named(block)])
        assert max(errs.values()) < TOL
