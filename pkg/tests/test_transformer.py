import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nl2code import tensor as T
from nl2code.optim import Adam
from nl2code.tensor import Tensor
from nl2code.tokenizer import BOS, EOS, PAD
from nl2code.transformer import (TransformerConfig, TransformerModel, attention_bias,
                                 multi_head_attention, parameter_count, positional_encoding,
                                 soft_embed)

from conftest import max_rel_error, numeric_grad, tiny_config, tiny_model


def one_hot(ids, V):
    out = np.zeros(ids.shape + (V,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


class TestConfig:
    def test_defaults(self):
        c = TransformerConfig()
        assert (c.num_layers, c.num_heads, c.d_model, c.d_ff, c.dropout) == (1, 8, 128, 512, 0.2)
        assert (c.src_vocab, c.tgt_vocab, c.max_len) == (4000, 4000, 128)

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError, match="divisible"):
            TransformerConfig(d_model=10, num_heads=4)

    @pytest.mark.parametrize("layers,heads", [(0, 1), (1, 2), (2, 4), (3, 1)])
    def test_parameter_count_closed_form(self, layers, heads):
        cfg = tiny_config(num_layers=layers, num_heads=heads)
        assert TransformerModel(cfg).num_parameters() == parameter_count(cfg)

    def test_init_bounds(self):
        m = tiny_model()
        lim = 1 / math.sqrt(8)
        assert np.abs(m.params["src_emb"].data).max() <= lim
        np.testing.assert_array_equal(m.params["enc.0.ln1.gamma"].data, 1.0)
        np.testing.assert_array_equal(m.params["out.b"].data, 0.0)


class TestPositionalEncoding:
    def test_closed_form_values(self):
        pe = positional_encoding(50, 16)
        np.testing.assert_array_equal(pe[0, 0::2], 0.0)
        np.testing.assert_array_equal(pe[0, 1::2], 1.0)
        assert pe[1, 0] == pytest.approx(0.8414709848078965, abs=1e-15)
        assert pe[3, 5] == pytest.approx(math.cos(3 / 10000 ** (4 / 16)), abs=1e-15)
        assert np.abs(pe).max() <= 1.0

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            positional_encoding(4, 7)


class TestAttention:
    def test_hand_computed_two_by_two(self):
        x = np.array([[[1.0, 0.0], [0.0, 2.0]]])
        eye = Tensor(np.eye(2))
        out = multi_head_attention(Tensor(x), Tensor(x), eye, eye, eye, eye, None, 1).data[0]
        # scores = x x^T / sqrt(2)
        s = [[1 / math.sqrt(2), 0.0], [0.0, 4 / math.sqrt(2)]]
        for i in range(2):
            w0 = math.exp(s[i][0]) / (math.exp(s[i][0]) + math.exp(s[i][1]))
            want = [w0 * 1.0, (1 - w0) * 2.0]
            np.testing.assert_allclose(out[i], want, atol=1e-12)

    def test_identical_keys_give_uniform_weights(self, rng):
        q = Tensor(rng.normal(size=(1, 2, 4)))
        kv = Tensor(np.tile(rng.normal(size=(1, 1, 4)), (1, 3, 1)))
        W = [Tensor(rng.normal(size=(4, 4))) for _ in range(4)]
        out = multi_head_attention(q, kv, *W, None, 2).data
        want = kv.data[0, 0] @ W[2].data @ W[3].data
        np.testing.assert_allclose(out[0], np.tile(want, (2, 1)), atol=1e-12)

    def test_single_key(self, rng):
        q = Tensor(rng.normal(size=(1, 3, 4)))
        kv = Tensor(rng.normal(size=(1, 1, 4)))
        W = [Tensor(rng.normal(size=(4, 4))) for _ in range(4)]
        out = multi_head_attention(q, kv, *W, None, 4).data
        np.testing.assert_allclose(out[0], np.tile(kv.data[0, 0] @ W[2].data @ W[3].data, (3, 1)),
                                   atol=1e-12)

    def test_causal_bias_exact(self):
        b = attention_bias(None, np.ones((1, 4), bool), causal=True)[0]
        assert ((b == 0) == np.tril(np.ones((4, 4), bool))).all()

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ValueError, match="no attendable key"):
            attention_bias(None, np.zeros((1, 3), bool))


class TestSoftEmbed:
    def test_one_hot_collapses_to_row(self, rng):
        table = Tensor(rng.normal(size=(6, 4)))
        out = soft_embed(Tensor(one_hot(np.array([3, 0, 5]), 6)), table).data
        assert np.abs(out - table.data[[3, 0, 5]]).max() <= 1e-12

    def test_uniform_is_column_mean(self, rng):
        table = Tensor(rng.normal(size=(5, 3)))
        out = soft_embed(Tensor(np.full((1, 5), 0.2)), table).data
        np.testing.assert_allclose(out[0], table.data.mean(0), atol=1e-12)

    def test_hand_mixture(self):
        table = Tensor(np.eye(4))
        out = soft_embed(Tensor(np.array([[0.5, 0.5, 0.0, 0.0]])), table).data
        np.testing.assert_allclose(out, [[0.5, 0.5, 0.0, 0.0]])

    def test_rejects_non_distribution(self):
        with pytest.raises(ValueError):
            soft_embed(Tensor(np.array([[0.5, 0.6]])), Tensor(np.eye(2)))

    def test_gradient_reaches_dist_and_table(self, rng):
        d = Tensor(np.array([[0.2, 0.3, 0.5]]), requires_grad=True)
        e = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        (soft_embed(d, e) * Tensor(np.array([[1.0, -2.0]]))).sum().backward()
        np.testing.assert_allclose(d.grad[0], e.data @ [1.0, -2.0])
        np.testing.assert_allclose(e.grad, np.outer([0.2, 0.3, 0.5], [1.0, -2.0]))


class TestForward:
    src = np.array([[BOS, 4, 5, 6, EOS], [BOS, 7, EOS, PAD, PAD]])
    tgt = np.array([[BOS, 4, 4, EOS], [BOS, 5, EOS, PAD]])

    def test_zero_layers_memory_is_embedding_plus_pe(self):
        m = tiny_model(num_layers=0)
        mem = m.encode(self.src).data
        want = m.params["src_emb"].data[self.src] * math.sqrt(8) + positional_encoding(12, 8)[:5]
        np.testing.assert_allclose(mem, want, atol=1e-12)

    def test_eval_is_deterministic(self):
        m = tiny_model(dropout=0.3)
        a = m.forward_nll(self.src, self.tgt).item()
        assert a == m.forward_nll(self.src, self.tgt).item()
        m.train()
        assert m.forward_nll(self.src, self.tgt).item() != a

    def test_one_hot_source_equals_ids(self):
        m = tiny_model()
        hard = m.encode(self.src[:1]).data
        soft = m.encode(Tensor(one_hot(self.src[:1], 9))).data
        assert np.abs(hard - soft).max() <= 1e-12

    def test_bos_only_target_shape(self):
        m = tiny_model()
        mem = m.encode(self.src[:1])
        assert m.decode(np.array([[BOS]]), mem, self.src[:1] != PAD).shape == (1, 1, 7)

    def test_over_length_rejected(self):
        m = tiny_model(max_len=4)
        with pytest.raises(ValueError, match="max_len"):
            m.encode(self.src)

    def test_memory_width_checked(self):
        m = tiny_model()
        with pytest.raises(T.ShapeError):
            m.decode(np.array([[BOS]]), Tensor(np.zeros((1, 2, 6))), np.ones((1, 2), bool))

    def test_untrained_loss_near_log_vocab(self):
        m = tiny_model(tgt_vocab=6)
        loss = m.forward_nll(self.src, self.tgt).item()
        assert abs(loss - math.log(6)) < 0.5

    def test_overfits_one_pair(self):
        m = tiny_model(seed=3).train()
        opt = Adam(m.params)
        src, tgt = self.src[:1], self.tgt[:1]
        for _ in range(500):
            loss = m.forward_nll(src, tgt)
            loss.backward()
            opt.step(0.01)
        assert m.eval().forward_nll(src, tgt).item() < 0.01


class TestInvariants:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 3), st.integers(3, 6), st.integers(0, 1000))
    def test_causality(self, j, new_tok, seed):
        m = tiny_model(seed=seed % 7)
        src = np.array([[BOS, 4, 5, EOS]])
        tgt = np.array([[BOS, 3, 4, 5, 6]])
        mem = m.encode(src)
        base = m.decode(tgt, mem, src != PAD).data
        pert = tgt.copy()
        pert[0, j + 1:] = new_tok
        out = m.decode(pert, mem, src != PAD).data
        np.testing.assert_array_equal(out[0, :j + 1], base[0, :j + 1])

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 8), min_size=1, max_size=4), st.integers(0, 5))
    def test_padding_invariance(self, junk, seed):
        m = tiny_model(seed=seed)
        src = np.array([[BOS, 4, 5, EOS] + [PAD] * len(junk)])
        mask = src != PAD
        noisy = src.copy()
        noisy[0, 4:] = junk
        tgt = np.array([[BOS, 4, 5]])
        a = m.decode(tgt, m.encode(src, mask), mask).data
        b = m.decode(tgt, m.encode(noisy, mask), mask).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 50))
    def test_softmax_outputs_sum_to_one(self, seed):
        m = tiny_model(seed=seed)
        src = np.array([[BOS, 4, EOS]])
        logits = m.decode(np.array([[BOS, 5, 6]]), m.encode(src), src != PAD)
        p = T.softmax(logits).data
        assert np.abs(p.sum(-1) - 1).max() <= 1e-9

    def test_loss_non_negative(self, rng):
        m = tiny_model()
        for _ in range(5):
            src = np.concatenate([[BOS], rng.integers(4, 9, 4), [EOS]])[None]
            tgt = np.concatenate([[BOS], rng.integers(4, 7, 3), [EOS]])[None]
            assert m.forward_nll(src, tgt).item() >= 0


def test_full_model_gradient_check():
    """Every parameter of a 1-layer, 2-head, d_model=8 model against central differences."""
    cfg = TransformerConfig(num_layers=1, num_heads=2, d_model=8, d_ff=16, dropout=0.0,
                            src_vocab=7, tgt_vocab=6, max_len=10)
    m = TransformerModel(cfg, seed=1).eval()
    src = np.array([[BOS, 4, 5, EOS, PAD], [BOS, 6, EOS, PAD, PAD]])
    tgt = np.array([[BOS, 4, 4, EOS], [BOS, 5, EOS, PAD]])
    m.forward_nll(src, tgt).backward()
    worst = 0.0
    for name, p in m.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        num = numeric_grad(lambda: m.forward_nll(src, tgt).item(), p.data)
        worst = max(worst, max_rel_error(g, num))
    assert worst < 1e-4
