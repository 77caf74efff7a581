from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapos import tensor as T
from adapos.errors import AntennaIdError, ConfigurationError, ShapeError, ValidationError
from adapos.layers import (Conv1d, Dense, EmbeddingTable, EncoderLayer, LayerNorm, MultiHeadAttention,
                           ResNet1DBlock, SignalEncoder, dense_forward, embedding_lookup,
                           encoder_layer_forward, multi_head_attention, resnet_block_forward)
from adapos.tensor import ParamSet, Tensor, finite_difference_check, value_and_grad


def init(*layers, seed=0):
    rng = np.random.default_rng(seed)
    values = {}
    for layer in layers:
        values.update(layer.init_params(rng))
    return ParamSet(values)


def randomize(params, seed):
    """Replace zero-initialized biases etc. with random values so every path is exercised."""
    rng = np.random.default_rng(seed)
    return ParamSet({k: rng.uniform(-1, 1, v.shape) for k, v in params.items()})


class TestDense:
    def test_identity(self):
        layer = Dense("fc", 3, 3)
        params = ParamSet({"fc.weight": np.eye(3), "fc.bias": np.zeros(3)})
        x = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(dense_forward(layer, params, Tensor(x)).numpy(), x)

    def test_hand_computed(self):
        layer = Dense("fc", 2, 1)
        params = ParamSet({"fc.weight": np.array([[2.0], [3.0]]), "fc.bias": np.array([1.0])})
        np.testing.assert_array_equal(dense_forward(layer, params, Tensor([1.0, 1.0])).numpy(), [6.0])

    def test_shape_mismatch(self):
        layer = Dense("fc", 2, 1)
        with pytest.raises(ShapeError):
            layer(init(layer), Tensor(np.zeros((3, 4))))

    def test_init_scaling(self):
        layer = Dense("fc", 64, 32)
        w = init(layer)["fc.weight"].numpy()
        assert np.all(np.abs(w) <= 1 / np.sqrt(64))
        np.testing.assert_array_equal(init(layer)["fc.bias"].numpy(), 0.0)

    def test_gradient(self):
        layer = Dense("fc", 4, 3)
        x = Tensor(np.random.default_rng(1).uniform(-1, 1, (5, 4)))
        params = randomize(init(layer), 2)
        assert finite_difference_check(lambda p: T.sum_all(T.square(layer(p, x))), params).passed


class TestResNetBlock:
    def test_zero_branch_gives_relu(self):
        block = ResNet1DBlock("blk", 2, 2, n_taps=80)
        params = ParamSet({k: np.zeros(v.shape) for k, v in init(block).items()})
        x = np.random.default_rng(0).normal(size=(2, 80))
        np.testing.assert_array_equal(resnet_block_forward(block, params, Tensor(x)).numpy(), np.maximum(x, 0))

    def test_length_preserved(self):
        block = ResNet1DBlock("blk", 3, 8, n_taps=80)
        out = block(init(block), Tensor(np.random.default_rng(0).normal(size=(3, 80))))
        assert out.shape == (8, 80)

    def test_projection_iff_channels_differ(self):
        assert ResNet1DBlock("a", 4, 4, 10).proj is None
        assert ResNet1DBlock("b", 4, 8, 10).proj is not None
        assert "b.proj.kernel" in init(ResNet1DBlock("b", 4, 8, 10))

    def test_wrong_length(self):
        block = ResNet1DBlock("blk", 2, 2, n_taps=80)
        with pytest.raises(ShapeError):
            block(init(block), Tensor(np.zeros((2, 40))))

    @pytest.mark.parametrize("c_out", [3, 5])
    def test_gradient(self, c_out):
        block = ResNet1DBlock("blk", 3, c_out, n_taps=9)
        x = Tensor(np.random.default_rng(3).uniform(-1, 1, (3, 9)))
        params = randomize(init(block), 4)
        assert finite_difference_check(lambda p: T.sum_all(T.square(block(p, x))), params).passed

    def test_even_width_rejected(self):
        with pytest.raises(ConfigurationError):
            Conv1d("c", 1, 1, width=4)


class TestSignalEncoder:
    def test_shape_and_channels_last_path(self):
        enc = SignalEncoder("enc", 3, 80, 16, (16, 32, 64), 256)
        params = init(enc)
        out = enc(params, Tensor(np.random.default_rng(0).uniform(0, 1, (2, 5, 3, 80))))
        assert out.shape == (2, 5, 256)

    def test_wrong_input(self):
        enc = SignalEncoder("enc", 3, 80, 4, (4,), 8)
        with pytest.raises(ShapeError):
            enc(init(enc), Tensor(np.zeros((2, 4, 80))))

    def test_gradient(self):
        enc = SignalEncoder("enc", 3, 7, 3, (3, 4), 5)
        x = Tensor(np.random.default_rng(5).uniform(0, 1, (2, 3, 7)))
        params = randomize(init(enc), 6)
        assert finite_difference_check(lambda p: T.sum_all(T.square(enc(p, x))), params).passed


class TestAttention:
    def setup_method(self):
        self.mha = MultiHeadAttention("mha", 16, 4)
        self.params = init(self.mha, seed=1)

    def test_single_element_is_ov_composition(self):
        x = np.random.default_rng(0).normal(size=(1, 16))
        out = multi_head_attention(self.mha, self.params, Tensor(x)).numpy()
        expected = x @ self.params["mha.v"].numpy() @ self.params["mha.o"].numpy()
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_identical_rows(self):
        row = np.random.default_rng(1).normal(size=16)
        out = self.mha(self.params, Tensor(np.tile(row, (5, 1)))).numpy()
        np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=1e-12)

    def test_weights_are_probabilities(self):
        x = np.random.default_rng(2).normal(size=(3, 6, 16))
        _, w = self.mha(self.params, Tensor(x), return_weights=True)
        assert w.shape == (3, 4, 6, 6)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 8), st.randoms(use_true_random=False))
    def test_permutation_equivariance(self, n, pyrandom):
        x = np.random.default_rng(n).normal(size=(n, 16))
        perm = list(range(n))
        pyrandom.shuffle(perm)
        a = self.mha(self.params, Tensor(x)).numpy()
        b = self.mha(self.params, Tensor(x[perm])).numpy()
        assert np.max(np.abs(a[perm] - b)) <= 1e-9

    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError):
            MultiHeadAttention("m", 10, 3)

    def test_gradient(self):
        mha = MultiHeadAttention("mha", 8, 2)
        x = Tensor(np.random.default_rng(7).uniform(-1, 1, (4, 8)))
        params = init(mha, seed=8)
        assert finite_difference_check(lambda p: T.sum_all(T.square(mha(p, x))), params).passed


class TestEncoderLayer:
    def setup_method(self):
        self.layer = EncoderLayer("enc", 16, 4, 32)
        self.params = init(self.layer, seed=3)

    @pytest.mark.parametrize("n", [1, 2, 32])
    def test_shape(self, n):
        x = np.random.default_rng(n).normal(size=(n, 16))
        assert encoder_layer_forward(self.layer, self.params, Tensor(x)).shape == (n, 16)

    def test_default_dims(self):
        layer = EncoderLayer("enc", 256, 8, 1024)
        x = np.random.default_rng(0).normal(size=(6, 256))
        assert layer(init(layer), Tensor(x)).shape == (6, 256)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = int(rng.integers(2, 10))
            x = rng.normal(size=(n, 16))
            perm = rng.permutation(n)
            a = self.layer(self.params, Tensor(x)).numpy()
            b = self.layer(self.params, Tensor(x[perm])).numpy()
            assert np.max(np.abs(a[perm] - b)) <= 1e-9

    def test_gradient(self):
        layer = EncoderLayer("enc", 16, 4, 16)
        x = Tensor(np.random.default_rng(9).uniform(-1, 1, (3, 16)))
        params = randomize(init(layer), 10)
        assert finite_difference_check(lambda p: T.sum_all(T.square(layer(p, x))), params).passed


class TestLayerNormLayer:
    def test_init_is_identity_affine(self):
        ln = LayerNorm("ln", 4)
        p = init(ln)
        np.testing.assert_array_equal(p["ln.gain"].numpy(), 1.0)
        np.testing.assert_array_equal(p["ln.offset"].numpy(), 0.0)


class TestEmbedding:
    def setup_method(self):
        self.table = EmbeddingTable("emb", 4, 3)
        self.params = init(self.table)

    def test_lookup_order(self):
        rows = self.params["emb.rows"].numpy()
        out = embedding_lookup(self.table, self.params, [2, 0]).numpy()
        np.testing.assert_array_equal(out, rows[[2, 0]])

    def test_gradient_only_on_looked_up_rows(self):
        _, g = value_and_grad(lambda p: T.sum_all(self.table(p, [2, 0])), self.params)
        expected = np.zeros((4, 3))
        expected[[0, 2]] = 1.0
        np.testing.assert_array_equal(g["emb.rows"].numpy(), expected)

    def test_init_distribution(self):
        rows = init(EmbeddingTable("e", 64, 64))["e.rows"].numpy()
        assert abs(rows.std() - 0.02) < 0.002

    def test_duplicate_rejected(self):
        with pytest.raises(ValidationError):
            self.table(self.params, [0, 0])

    @pytest.mark.parametrize("bad", [-1, 4, 99])
    def test_out_of_range(self, bad):
        with pytest.raises(AntennaIdError):
            self.table(self.params, [0, bad])

    def test_empty(self):
        with pytest.raises(ValidationError):
            self.table(self.params, [])
