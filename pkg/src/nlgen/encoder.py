"""Slot-value pair encoding and the attention aligner.

Each pair is embedded as the concatenation of a slot embedding and a value
embedding, the pair sequence (ordered by slot name) is read by a one-layer
bidirectional LSTM whose directional states are summed, and at every decode
step an additive-attention aligner mixes the encoded pairs into a context
vector that is concatenated with the act-type embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .autodiff import Graph, Node
from .corpus import UNK, DialogueAct, DomainSchema, Vocab, sort_pairs_for_encoder

if TYPE_CHECKING:
    from .model import ModelParams


@dataclass
class EncodedSequence:
    """Summed bidirectional states, with per-direction traces for debugging."""

    states: list[Node]
    forward_trace: list[Node]
    backward_trace: list[Node]


@dataclass
class EncodedDa:
    """Everything the decoder needs per sequence: encoder states, the act
    embedding, and the hoisted attention keys (key_i = W_key @ e_i, reused
    across decode steps)."""

    encoded: EncodedSequence
    act_node: Node
    attn_keys: list[Node]

    @property
    def states(self) -> list[Node]:
        return self.encoded.states


def embed_pairs(g: Graph, params: "ModelParams", da: DialogueAct,
                vocab: Vocab) -> list[Node]:
    """One embedding per pair: slot embedding concatenated with value embedding."""
    out = []
    for p in da.pairs:
        u = g.select_row(params.slot_emb, vocab.slot_id(p.slot))
        v = g.select_row(params.value_emb, vocab.value_id(p.value))
        out.append(g.concat(u, v))
    return out


def lstm_chain(g: Graph, weights: Node, bias: Node, inputs: list[Node],
               hidden: int, reverse: bool = False) -> list[Node]:
    """Standard LSTM over a list of input vectors; returns hidden states in
    input order regardless of read direction. Gate blocks are i, f, o, c."""
    n = hidden
    h = g.input(np.zeros(n), name="h0")
    c = g.input(np.zeros(n), name="c0")
    states: list[Node] = []
    sequence = reversed(inputs) if reverse else inputs
    for x in sequence:
        pre = g.add(g.matmul(weights, g.concat(x, h)), bias)
        i = g.sigmoid(g.slice(pre, 0, n))
        f = g.sigmoid(g.slice(pre, n, 2 * n))
        o = g.sigmoid(g.slice(pre, 2 * n, 3 * n))
        c_hat = g.tanh(g.slice(pre, 3 * n, 4 * n))
        c = g.add(g.mul(f, c), g.mul(i, c_hat))
        h = g.mul(o, g.tanh(c))
        states.append(h)
    if reverse:
        states.reverse()
    return states


def bilstm_encode(g: Graph, params: "ModelParams", pair_embeds: list[Node]) -> EncodedSequence:
    """Encode the pair sequence both ways and sum the directional states."""
    n = params.hidden
    fwd = lstm_chain(g, params.enc_fwd_W, params.enc_fwd_b, pair_embeds, n)
    bwd = lstm_chain(g, params.enc_bwd_W, params.enc_bwd_b, pair_embeds, n, reverse=True)
    summed = [g.add(f, b) for f, b in zip(fwd, bwd)]
    return EncodedSequence(summed, fwd, bwd)


def attention_keys(g: Graph, params: "ModelParams", states: list[Node]) -> list[Node]:
    return [g.matmul(params.attn_key_W, e) for e in states]


def attend(g: Graph, params: "ModelParams", states: list[Node], h_prev: Node,
           keys: list[Node] | None = None) -> tuple[Node, Node]:
    """Additive attention over encoded pairs given the previous decoder state.

    Returns (weights, context): weights is the softmax over alignment scores
    score_i = v . tanh(W_key e_i + W_query h_prev), context = sum_i w_i e_i.
    """
    if keys is None:
        keys = attention_keys(g, params, states)
    query = g.matmul(params.attn_query_W, h_prev)
    scores = [g.matmul(params.attn_score_v, g.tanh(g.add(k, query))) for k in keys]
    weights = g.softmax(g.concat(*scores))
    context = None
    for i, e in enumerate(states):
        term = g.mul(g.select_row(weights, i), e)
        context = term if context is None else g.add(context, term)
    return weights, context


def da_representation(g: Graph, act_node: Node, context: Node) -> Node:
    """Act-type embedding concatenated with the attention context."""
    return g.concat(act_node, context)


def encode_da(g: Graph, params: "ModelParams", da: DialogueAct, vocab: Vocab,
              schema: DomainSchema) -> EncodedDa:
    """Full per-sequence encoder pass: sort pairs, embed, encode, hoist keys."""
    ordered = sort_pairs_for_encoder(da)
    embeds = embed_pairs(g, params, ordered, vocab)
    if not embeds:
        # Act-only DAs still need one encoder position; a neutral UNK/UNK
        # pair gives attention something to aggregate.
        u = g.select_row(params.slot_emb, vocab.slots[UNK])
        v = g.select_row(params.value_emb, vocab.values[UNK])
        embeds = [g.concat(u, v)]
    encoded = bilstm_encode(g, params, embeds)
    act_node = g.select_row(params.act_emb, vocab.act_id(da.act_type))
    keys = attention_keys(g, params, encoded.states)
    return EncodedDa(encoded, act_node, keys)


def load_embedding_file(path: str | Path) -> dict[str, np.ndarray]:
    """Read whitespace-separated text vectors: one token plus floats per line."""
    table: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise ValueError(f"{path}: line {lineno}: expected token plus floats")
        table[parts[0]] = np.asarray([float(x) for x in parts[1:]], dtype=np.float64)
    return table
