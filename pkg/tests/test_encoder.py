"""Pair embedding, bidirectional encoding, and attention, each checked
against independent plain-numpy recomputations."""

import numpy as np
import pytest

from nlgen.autodiff import Graph, grad_check
from nlgen.corpus import DialogueAct, SlotValue
from nlgen.encoder import (attend, attention_keys, bilstm_encode,
                           da_representation, embed_pairs, encode_da,
                           load_embedding_file, lstm_chain)
from nlgen.training import gradcheck_model_fixture


@pytest.fixture()
def toy():
    model, da = gradcheck_model_fixture(hidden=8, pairs=3, seed=2)
    return model, da


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _np_lstm(W, b, xs, n, reverse=False):
    h, c = np.zeros(n), np.zeros(n)
    out = []
    for x in (reversed(xs) if reverse else xs):
        pre = W @ np.concatenate([x, h]) + b
        i, f, o = (_np_sigmoid(pre[0:n]), _np_sigmoid(pre[n:2 * n]),
                   _np_sigmoid(pre[2 * n:3 * n]))
        c = f * c + i * np.tanh(pre[3 * n:4 * n])
        h = o * np.tanh(c)
        out.append(h)
    if reverse:
        out.reverse()
    return out


# ---------------------------------------------------------------------------
# embed_pairs


def test_embed_pairs_shapes(toy):
    model, _ = toy
    da = DialogueAct("inform", (SlotValue("area", "cheap"), SlotValue("food", "kebab")))
    g = Graph(model.params.registry)
    zs = embed_pairs(g, model.params, da, model.vocab)
    assert len(zs) == 2
    assert all(z.value.shape == (8,) for z in zs)  # m=4 per side


def test_embed_pairs_identical_pairs_identical_vectors(toy):
    model, _ = toy
    da = DialogueAct("inform", (SlotValue("food", "kebab"), SlotValue("food", "kebab")))
    g = Graph(model.params.registry)
    zs = embed_pairs(g, model.params, da, model.vocab)
    np.testing.assert_array_equal(zs[0].value, zs[1].value)


def test_embed_pairs_permutation_equivariance(toy):
    model, _ = toy
    pairs = (SlotValue("area", "cheap"), SlotValue("food", "kebab"),
             SlotValue("name", "northern"))
    g = Graph(model.params.registry)
    fwd = embed_pairs(g, model.params, DialogueAct("inform", pairs), model.vocab)
    rev = embed_pairs(g, model.params, DialogueAct("inform", pairs[::-1]), model.vocab)
    for a, b in zip(fwd, rev[::-1]):
        np.testing.assert_array_equal(a.value, b.value)


# ---------------------------------------------------------------------------
# bilstm_encode


def test_bilstm_single_element_is_sum_of_directions(toy):
    model, _ = toy
    rng = np.random.default_rng(0)
    g = Graph(model.params.registry)
    z = g.input(rng.normal(size=8))
    enc = bilstm_encode(g, model.params, [z])
    np.testing.assert_allclose(
        enc.states[0].value,
        enc.forward_trace[0].value + enc.backward_trace[0].value, atol=1e-15)


def test_bilstm_zero_parameters_give_zero_states(toy):
    model, _ = toy
    for name in ("enc_fwd_W", "enc_fwd_b", "enc_bwd_W", "enc_bwd_b"):
        model.params.registry[name].value[...] = 0.0
    rng = np.random.default_rng(1)
    g = Graph(model.params.registry)
    zs = [g.input(rng.normal(size=8)) for _ in range(3)]
    enc = bilstm_encode(g, model.params, zs)
    for e in enc.states:
        np.testing.assert_array_equal(e.value, np.zeros(8))


def test_bilstm_matches_hand_rolled_oracle(toy):
    model, _ = toy
    params = model.params
    rng = np.random.default_rng(4)
    xs = [rng.normal(size=8) for _ in range(3)]
    g = Graph(params.registry)
    enc = bilstm_encode(g, params, [g.input(x) for x in xs])
    w_f, b_f = params.enc_fwd_W.value, params.enc_fwd_b.value
    w_b, b_b = params.enc_bwd_W.value, params.enc_bwd_b.value
    expected_f = _np_lstm(w_f, b_f, xs, 8)
    expected_b = _np_lstm(w_b, b_b, xs, 8, reverse=True)
    for e, f, b in zip(enc.states, expected_f, expected_b):
        np.testing.assert_allclose(e.value, f + b, atol=1e-12)


def test_lstm_chain_reverse_reads_right_to_left(toy):
    model, _ = toy
    params = model.params
    rng = np.random.default_rng(6)
    xs = [rng.normal(size=8) for _ in range(4)]
    g = Graph(params.registry)
    states = lstm_chain(g, params.enc_bwd_W, params.enc_bwd_b,
                        [g.input(x) for x in xs], 8, reverse=True)
    expected = _np_lstm(params.enc_bwd_W.value, params.enc_bwd_b.value, xs, 8,
                        reverse=True)
    for s, e in zip(states, expected):
        np.testing.assert_allclose(s.value, e, atol=1e-12)


# ---------------------------------------------------------------------------
# attend


def test_attend_equal_states_uniform_weights(toy):
    model, _ = toy
    rng = np.random.default_rng(2)
    g = Graph(model.params.registry)
    e = g.input(rng.normal(size=8))
    weights, context = attend(g, model.params, [e, e, e, e],
                              g.input(rng.normal(size=8)))
    np.testing.assert_allclose(weights.value, np.full(4, 0.25), atol=1e-12)
    np.testing.assert_allclose(context.value, e.value, atol=1e-12)


def test_attend_zero_score_vector_uniform_weights(toy):
    model, _ = toy
    model.params.attn_score_v.value[...] = 0.0
    rng = np.random.default_rng(3)
    g = Graph(model.params.registry)
    states = [g.input(rng.normal(size=8)) for _ in range(5)]
    weights, _ = attend(g, model.params, states, g.input(rng.normal(size=8)))
    np.testing.assert_allclose(weights.value, np.full(5, 0.2), atol=1e-12)


def test_attend_matches_direct_formula(toy):
    model, _ = toy
    params = model.params
    rng = np.random.default_rng(8)
    states_np = [rng.normal(size=8) for _ in range(4)]
    h_np = rng.normal(size=8)
    g = Graph(params.registry)
    states = [g.input(e) for e in states_np]
    weights, context = attend(g, params, states, g.input(h_np))

    v = params.attn_score_v.value[0]
    scores = np.array([v @ np.tanh(params.attn_key_W.value @ e
                                   + params.attn_query_W.value @ h_np)
                       for e in states_np])
    expected_w = np.exp(scores - scores.max())
    expected_w /= expected_w.sum()
    expected_ctx = sum(w * e for w, e in zip(expected_w, states_np))
    np.testing.assert_allclose(weights.value, expected_w, atol=1e-12)
    np.testing.assert_allclose(context.value, expected_ctx, atol=1e-12)


def test_attend_single_state(toy):
    model, _ = toy
    rng = np.random.default_rng(10)
    g = Graph(model.params.registry)
    e = g.input(rng.normal(size=8))
    weights, context = attend(g, model.params, [e], g.input(rng.normal(size=8)))
    np.testing.assert_allclose(weights.value, [1.0], atol=1e-15)
    np.testing.assert_array_equal(context.value, e.value)


def test_attend_weights_are_probabilities_over_seeds(toy):
    model, _ = toy
    for seed in range(100):
        rng = np.random.default_rng(seed)
        g = Graph(model.params.registry)
        states = [g.input(rng.normal(size=8)) for _ in range(rng.integers(1, 6))]
        weights, _ = attend(g, model.params, states, g.input(rng.normal(size=8)))
        assert np.all(weights.value >= 0)
        assert abs(weights.value.sum() - 1.0) < 1e-12


def test_attend_permuting_inputs_permutes_weights(toy):
    model, _ = toy
    rng = np.random.default_rng(12)
    states_np = [rng.normal(size=8) for _ in range(4)]
    h_np = rng.normal(size=8)
    perm = [2, 0, 3, 1]

    def run(vals):
        g = Graph(model.params.registry)
        weights, context = attend(g, model.params, [g.input(v) for v in vals],
                                  g.input(h_np))
        return weights.value, context.value

    w1, c1 = run(states_np)
    w2, c2 = run([states_np[i] for i in perm])
    np.testing.assert_allclose(w2, w1[perm], atol=1e-12)
    np.testing.assert_allclose(c2, c1, atol=1e-12)


def test_attend_gradient_matches_finite_differences(toy):
    model, _ = toy
    rng = np.random.default_rng(14)
    states_np = [rng.normal(size=8) for _ in range(3)]
    h_np = rng.normal(size=8)
    direction = rng.normal(size=8)

    def build(g):
        states = [g.input(e) for e in states_np]
        _, context = attend(g, model.params, states, g.input(h_np))
        return g.sum(g.mul(context, g.input(direction)))

    assert grad_check(build, model.params.registry, epsilon=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# da_representation and encode_da


def test_da_representation_zero_act_embedding(toy):
    model, _ = toy
    rng = np.random.default_rng(15)
    g = Graph(model.params.registry)
    ctx = g.input(rng.normal(size=8))
    d = da_representation(g, g.input(np.zeros(8)), ctx)
    np.testing.assert_array_equal(d.value[:8], np.zeros(8))
    np.testing.assert_array_equal(d.value[8:], ctx.value)


def test_da_representation_uniform_over_equal_states(toy):
    model, _ = toy
    rng = np.random.default_rng(16)
    g = Graph(model.params.registry)
    e = g.input(rng.normal(size=8))
    _, context = attend(g, model.params, [e, e], g.input(rng.normal(size=8)))
    act = g.input(rng.normal(size=8))
    d = da_representation(g, act, context)
    assert d.value.shape == (16,)
    np.testing.assert_allclose(d.value[8:], e.value, atol=1e-12)


def test_encode_da_act_only_uses_placeholder_pair(toy):
    model, _ = toy
    g = Graph(model.params.registry)
    enc = encode_da(g, model.params, DialogueAct("request", ()), model.vocab,
                    model.schema)
    assert len(enc.states) == 1
    assert len(enc.attn_keys) == 1


def test_encode_da_hoisted_keys_match_attention_keys(toy):
    model, da = toy
    g = Graph(model.params.registry)
    enc = encode_da(g, model.params, da, model.vocab, model.schema)
    fresh = attention_keys(g, model.params, enc.states)
    for a, b in zip(enc.attn_keys, fresh):
        np.testing.assert_array_equal(a.value, b.value)


# ---------------------------------------------------------------------------
# embedding file reader


def test_load_embedding_file(tmp_path):
    path = tmp_path / "vectors.txt"
    path.write_text("the 0.1 0.2 0.3\nfork -1 0 1\n\n")
    table = load_embedding_file(path)
    assert set(table) == {"the", "fork"}
    np.testing.assert_allclose(table["the"], [0.1, 0.2, 0.3])
    (tmp_path / "bad.txt").write_text("loner\n")
    with pytest.raises(ValueError, match="line 1"):
        load_embedding_file(tmp_path / "bad.txt")
