"""Layers: attention/FFN/encoder blocks, init statistics, loss identities."""

import math

import numpy as np
import pytest

import tokmoe.nn as nn
import tokmoe.tensor as T
from tokmoe.errors import ConfigError, DataError
from tokmoe.tensor import Tensor, backward


class TestLinearInit:
    def test_glorot_bound(self, rng):
        w = nn.glorot_uniform(rng, 30, 20, (20, 30))
        bound = math.sqrt(6.0 / 50.0)
        assert w.shape == (20, 30)
        assert np.all(np.abs(w) <= bound)
        assert np.abs(w).max() > 0.5 * bound

    def test_seed_determinism(self):
        a = nn.LinearParams(np.random.default_rng(7), 5, 3)
        b = nn.LinearParams(np.random.default_rng(7), 5, 3)
        assert np.array_equal(a.weight.data, b.weight.data)

    def test_bias_starts_zero(self, rng):
        p = nn.LinearParams(rng, 5, 3)
        assert np.all(p.bias.data == 0.0)

    def test_zero_init(self, rng):
        p = nn.LinearParams(rng, 5, 3, zero_init=True)
        assert np.all(p.weight.data == 0.0)

    def test_linear_matches_numpy(self, rng):
        p = nn.LinearParams(rng, 4, 2)
        x = rng.standard_normal((6, 4))
        out = nn.linear(Tensor(x), p)
        assert np.allclose(out.data, x @ p.weight.data.T + p.bias.data)


class TestAttention:
    def test_rows_sum_to_one(self, rng):
        p = nn.AttentionParams(rng, 8, 2)
        x = Tensor(rng.standard_normal((3, 5, 8)))
        out, attn = nn.self_attention(x, p)
        assert out.data.shape == (3, 5, 8)
        assert attn.data.shape == (3, 2, 5, 5)
        assert np.allclose(attn.data.sum(axis=-1), 1.0, atol=1e-10)

    def test_single_head_matches_multi_head_code_path(self, rng):
        """One head via the fast path equals an explicit head split of one."""
        p = nn.AttentionParams(rng, 6, 1)
        x = rng.standard_normal((2, 4, 6))
        out, attn = nn.self_attention(Tensor(x), p)

        q = x @ p.wq.weight.data.T + p.wq.bias.data
        k = x @ p.wk.weight.data.T + p.wk.bias.data
        v = x @ p.wv.weight.data.T + p.wv.bias.data
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(6.0)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        a = e / e.sum(axis=-1, keepdims=True)
        want = (a @ v) @ p.wo.weight.data.T + p.wo.bias.data
        assert np.allclose(out.data, want, atol=1e-12)
        assert np.allclose(attn.data[:, 0], a, atol=1e-12)

    def test_permutation_equivariance(self, rng):
        """No positional input inside attention: permuting tokens permutes output."""
        p = nn.AttentionParams(rng, 8, 2)
        x = rng.standard_normal((1, 6, 8))
        perm = rng.permutation(6)
        out, _ = nn.self_attention(Tensor(x), p)
        out_p, _ = nn.self_attention(Tensor(x[:, perm]), p)
        assert np.allclose(out_p.data, out.data[:, perm], atol=1e-10)

    def test_heads_must_divide_dim(self, rng):
        with pytest.raises(ConfigError):
            nn.AttentionParams(rng, 8, 3)

    def test_grad_flows_to_all_projections(self, rng):
        p = nn.AttentionParams(rng, 4, 2)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        out, _ = nn.self_attention(x, p)
        backward((out * out).sum())
        for name, t in p.named_params("attn"):
            if name.endswith("weight"):
                assert t.grad is not None and np.any(t.grad != 0.0), name
        assert x.grad is not None


class TestEncoderLayer:
    def test_prenorm_residual_identity_at_zero_weights(self, rng):
        """Zeroed sublayer outputs leave the residual stream unchanged."""
        p = nn.EncoderLayerParams(rng, 6, 1, 24)
        p.attn.wo.weight.data[:] = 0.0
        p.attn.wo.bias.data[:] = 0.0
        p.ffn.lin2.weight.data[:] = 0.0
        p.ffn.lin2.bias.data[:] = 0.0
        x = rng.standard_normal((2, 4, 6))
        out, _ = nn.encoder_layer(Tensor(x), p)
        assert np.allclose(out.data, x, atol=1e-12)

    def test_stack_depth(self, rng):
        p = nn.EncoderStackParams(rng, 3, 8, 2, 32)
        x = Tensor(rng.standard_normal((2, 5, 8)))
        out, attns = nn.encoder_stack(x, p)
        assert out.data.shape == (2, 5, 8)
        assert len(attns) == 3

    def test_zero_layer_stack_rejected(self, rng):
        with pytest.raises(ConfigError):
            nn.EncoderStackParams(rng, 0, 8, 2, 32)


class TestFeedForward:
    def test_hidden_width(self, rng):
        p = nn.FeedForwardParams(rng, 6, 24)
        assert p.lin1.weight.data.shape == (24, 6)
        assert p.lin2.weight.data.shape == (6, 24)

    def test_matches_numpy(self, rng):
        from scipy.special import erf
        p = nn.FeedForwardParams(rng, 4, 16)
        x = rng.standard_normal((3, 4))
        h = x @ p.lin1.weight.data.T + p.lin1.bias.data
        h = h * 0.5 * (1.0 + erf(h / math.sqrt(2.0)))
        want = h @ p.lin2.weight.data.T + p.lin2.bias.data
        out = nn.feed_forward(Tensor(x), p)
        assert np.allclose(out.data, want, atol=1e-12)


class TestMLP:
    def test_layer_dims(self, rng):
        p = nn.MLPParams(rng, [10, 7, 4, 2])
        shapes = [lin.weight.data.shape for lin in p.layers]
        assert shapes == [(7, 10), (4, 7), (2, 4)]

    def test_single_layer_is_linear(self, rng):
        p = nn.MLPParams(rng, [5, 2])
        x = rng.standard_normal((3, 5))
        out = nn.mlp(Tensor(x), p)
        want = x @ p.layers[0].weight.data.T + p.layers[0].bias.data
        assert np.allclose(out.data, want, atol=1e-12)


class TestCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        logits = Tensor(np.zeros((4, 2)))
        loss = nn.cross_entropy(logits, np.array([0, 1, 0, 1]))
        assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_matches_manual(self, rng):
        x = rng.standard_normal((5, 2))
        labels = np.array([0, 1, 1, 0, 1])
        loss = nn.cross_entropy(Tensor(x), labels)
        z = x - x.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        want = -logp[np.arange(5), labels].mean()
        assert abs(loss.item() - want) < 1e-12

    def test_gradient_is_softmax_minus_onehot(self, rng):
        x = rng.standard_normal((6, 2))
        labels = np.array([1, 0, 1, 1, 0, 0])
        t = Tensor(x, requires_grad=True)
        backward(nn.cross_entropy(t, labels))
        e = np.exp(x - x.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        onehot = np.eye(2)[labels]
        assert np.allclose(t.grad, (p - onehot) / 6.0, atol=1e-10)

    def test_confident_correct_has_small_loss(self):
        logits = Tensor(np.array([[10.0, -10.0], [-10.0, 10.0]]))
        loss = nn.cross_entropy(logits, np.array([0, 1]))
        assert loss.item() < 1e-6

    def test_out_of_range_label_is_data_error(self):
        with pytest.raises(DataError):
            nn.cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))

    def test_negative_label_is_data_error(self):
        with pytest.raises(DataError):
            nn.cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, -1]))

    def test_noninteger_label_is_data_error(self):
        with pytest.raises(DataError):
            nn.cross_entropy(Tensor(np.zeros((2, 2))), np.array([0.5, 1.0]))

    def test_wrong_shape_is_config_error(self):
        with pytest.raises(ConfigError):
            nn.cross_entropy(Tensor(np.zeros((2, 2))), np.array([0]))
