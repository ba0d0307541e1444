import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aptune import numerics as nx
from aptune.gating import PrefixGates
from aptune.numerics import Tensor
from aptune.transformer import Backbone, LayerPrefix, ModelConfig, encode, feed_forward, prefix_attention

import reference
from conftest import grad_check, random_projection_loss, small_config


def _ids(rng, cfg, b, s):
    return rng.integers(3, cfg.vocab_size, size=(b, s))


class TestConfig:
    def test_width_must_divide_heads(self):
        with pytest.raises(ValueError):
            ModelConfig(model_dim=10, num_heads=3)

    def test_pt2_plus_lengths(self):
        cfg = ModelConfig(prefix_len=3, mode="pt2_plus")
        assert cfg.layer_prefix_lengths() == [5, 5]

    def test_pt2_star_requires_lengths(self):
        with pytest.raises(ValueError):
            ModelConfig(mode="pt2_star")

    def test_dict_round_trip(self):
        cfg = ModelConfig(mode="pt2_star", prefix_lengths=(1, 3))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestAttention:
    def test_empty_prefix_matches_vanilla(self, backbone64):
        cfg, bb = backbone64
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 5, cfg.model_dim)))
        empty = Tensor(np.zeros((2, 0, cfg.model_dim)))
        a = prefix_attention(x, bb.layers[0], cfg.num_heads, LayerPrefix(empty, empty))
        b = prefix_attention(x, bb.layers[0], cfg.num_heads)
        np.testing.assert_array_equal(a.data, b.data)

    def test_two_position_hand_case(self):
        # one head, d=1, s=1, l=1: q*k_prefix = 2, q*k_self = 0
        d = 1
        cfg = ModelConfig(num_layers=1, num_heads=1, model_dim=d, ffn_dim=1, vocab_size=4, prefix_len=1)
        layer = Backbone.init(cfg, 0, np.float64).layers[0]
        for name in ("wq", "wk", "wv", "wo"):
            getattr(layer, name).data = np.ones((1, 1))
        x = Tensor(np.array([[[1.0]]]))
        pk = Tensor(np.array([[[2.0]]]))
        pv = Tensor(np.array([[[5.0]]]))
        out, probs = prefix_attention(x, layer, 1, LayerPrefix(pk, pv), return_probs=True)
        w = np.exp([2.0, 1.0]) / np.exp([2.0, 1.0]).sum()
        assert out.data[0, 0, 0] == pytest.approx(w[0] * 5.0 + w[1] * 1.0, abs=1e-14)
        np.testing.assert_allclose(probs[0, 0, 0], w, atol=1e-15)

    def test_rows_sum_to_one_and_prefix_always_attendable(self, backbone64):
        cfg, bb = backbone64
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 4, cfg.model_dim)))
        pk = Tensor(rng.normal(size=(2, 3, cfg.model_dim)))
        mask = np.array([[True, True, False, False], [True, True, True, True]])
        _, probs = prefix_attention(x, bb.layers[0], cfg.num_heads, LayerPrefix(pk, pk), mask, return_probs=True)
        np.testing.assert_allclose(probs.sum(-1), 1.0, rtol=0, atol=1e-12)
        assert np.all(probs[..., :3] > 0)
        assert np.all(probs[0, :, :, 3 + 2:] == 0)

    def test_prefix_width_rejected(self, backbone64):
        cfg, bb = backbone64
        x = Tensor(np.zeros((1, 2, cfg.model_dim)))
        bad = Tensor(np.zeros((1, 2, cfg.model_dim + 2)))
        with pytest.raises(ValueError):
            prefix_attention(x, bb.layers[0], cfg.num_heads, LayerPrefix(bad, bad))

    def test_matches_loop_reference(self, backbone64):
        cfg, bb = backbone64
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 4, cfg.model_dim))
        pk, pv = rng.normal(size=(2, 1, 3, cfg.model_dim))
        lw = bb.layers[1]
        got = prefix_attention(Tensor(x), lw, cfg.num_heads, LayerPrefix(Tensor(pk), Tensor(pv))).data[0]
        f = lambda t: t.data
        want = reference.attention(x[0], f(lw.wq), f(lw.wk), f(lw.wv), f(lw.wo), cfg.num_heads, pk[0], pv[0])
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


class TestFeedForward:
    def test_zero_weights(self, backbone64):
        cfg, bb = backbone64
        lw = bb.layers[0]
        for t in (lw.w1, lw.w2, lw.b1, lw.b2):
            t.data = np.zeros_like(t.data)
        out = feed_forward(Tensor(np.ones((1, 2, cfg.model_dim))), lw)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_dead_relu(self, backbone64):
        cfg, bb = backbone64
        lw = bb.layers[0]
        lw.b1.data = np.full_like(lw.b1.data, -1e6)
        out = feed_forward(Tensor(np.ones((1, 2, cfg.model_dim))), lw)
        np.testing.assert_array_equal(out.data, np.broadcast_to(lw.b2.data, out.shape))

    def test_gradients_of_all_four_parameters(self, backbone64):
        cfg, bb = backbone64
        lw = bb.layers[0]
        params = [lw.w1, lw.b1, lw.w2, lw.b2]
        for p in params:
            p.requires_grad = True
            p.data = p.data + 0.1  # keep pre-activations off the ReLU kink
        x = Tensor(np.random.default_rng(3).normal(size=(2, 3, cfg.model_dim)))
        errs = grad_check(lambda: random_projection_loss(feed_forward(x, lw)), params)
        assert max(errs) < 1e-5


class TestEncode:
    def test_no_layers(self):
        cfg = small_config(num_layers=0)
        bb = Backbone.init(cfg, 0, np.float64)
        state = encode(np.array([[3, 4]]), cfg, bb)
        assert len(state.hidden) == 1
        want = bb.tok_emb.data[[3, 4]] + bb.pos_emb.data[:2]
        np.testing.assert_array_equal(state.last.data[0], want)

    def test_out_of_range_token(self, backbone64):
        cfg, bb = backbone64
        with pytest.raises(ValueError):
            encode(np.array([[cfg.vocab_size]]), cfg, bb)

    def test_too_long(self, backbone64):
        cfg, bb = backbone64
        with pytest.raises(ValueError):
            encode(np.zeros((1, cfg.max_seq_len + 1), dtype=int), cfg, bb)

    def test_identical_rows(self, backbone64):
        cfg, bb = backbone64
        gates = PrefixGates.init(cfg, 0, np.float64)
        row = _ids(np.random.default_rng(4), cfg, 1, 6)
        state = encode(np.vstack([row, row]), cfg, bb, gates)
        for h in state.hidden:
            np.testing.assert_array_equal(h.data[0], h.data[1])

    @pytest.mark.parametrize("mode", ["pt2", "apt", "no_hidden", "no_layer_gate"])
    def test_matches_reference_encoder(self, backbone64, mode):
        cfg, bb = backbone64
        cfg = cfg.with_mode(mode)
        rng = np.random.default_rng(5)
        gates = PrefixGates.init(cfg, 1, np.float64, prefix_std=0.5)
        for _, t in gates.named_tensors():
            t.data = t.data + rng.normal(scale=0.3, size=t.shape)
        ids = _ids(rng, cfg, 2, 5)
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        state = encode(ids, cfg, bb, gates, mask)
        for r in range(2):
            want = reference.encode_one(ids[r], mask[r], bb, cfg.num_heads, reference.apt_prefixes(gates))
            for got, exp in zip(state.hidden, want):
                np.testing.assert_allclose(got.data[r][mask[r]], exp[mask[r]], rtol=0, atol=1e-10)


def _perturbed_gates(cfg, seed):
    rng = np.random.default_rng(seed)
    gates = PrefixGates.init(cfg, seed, np.float64, prefix_std=0.5)
    for _, t in gates.named_tensors():
        t.data = t.data + rng.normal(scale=0.5, size=t.shape)
    return gates


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_batch_permutation_equivariance(seed, b):
    cfg = small_config()
    bb = Backbone.init(cfg, seed, np.float64)
    gates = _perturbed_gates(cfg, seed)
    rng = np.random.default_rng(seed)
    ids = _ids(rng, cfg, b, 4)
    perm = rng.permutation(b)
    a = encode(ids, cfg, bb, gates).last.data
    p = encode(ids[perm], cfg, bb, gates).last.data
    np.testing.assert_allclose(p, a[perm], rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_zero_prefix_equals_prefix_free(seed):
    cfg = small_config(prefix_len=0)
    bb = Backbone.init(cfg, seed, np.float64)
    gates = PrefixGates.init(cfg, seed, np.float64)
    ids = _ids(np.random.default_rng(seed), cfg, 3, 6)
    with_hook = encode(ids, cfg, bb, gates)
    without = encode(ids, cfg, bb)
    for a, b in zip(with_hook.hidden, without.hidden):
        assert np.max(np.abs(a.data - b.data)) <= 1e-12


def test_dropout_is_identity_at_zero(backbone64):
    cfg, bb = backbone64
    ids = _ids(np.random.default_rng(6), cfg, 2, 4)
    a = encode(ids, cfg, bb, rng=np.random.default_rng(0)).last.data
    b = encode(ids, cfg, bb).last.data
    np.testing.assert_array_equal(a, b)


def test_gradient_through_encoder_to_embeddings(backbone64):
    cfg, bb = backbone64
    bb.pos_emb.requires_grad = True
    ids = _ids(np.random.default_rng(7), cfg, 2, 3)
    errs = grad_check(lambda: random_projection_loss(encode(ids, cfg, bb).last), [bb.pos_emb])
    assert max(errs) < 1e-5


def test_layer_norm_zero_variance_is_finite():
    x = Tensor(np.ones((1, 2, 4)))
    out = nx.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.all(np.isfinite(out.data))
