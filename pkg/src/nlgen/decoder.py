"""The gated decoder cell: refinement, conditioned LSTM, adjustment, output.

Per step the cell (i) refines the incoming token embedding with a sigmoid
gate computed from the attentional DA representation and the previous hidden
state, (ii) runs an LSTM over the concatenated (refined token, DA
representation, previous hidden) input whose cell update carries an extra
tanh term from the refinement gate, and (iii) multiplicatively decays the
binary DA feature vector s, contributing a second output read from what
remains of s. Ablation variants drop the refinement gate ("wo-r") or the
adjustment cell ("wo-a").
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .autodiff import Graph, Node
from .encoder import EncodedDa, attend, da_representation

if TYPE_CHECKING:
    from .model import NLGModel, ModelParams


class CellVariant(enum.Enum):
    FULL = "full"
    WITHOUT_REFINEMENT = "wo-r"
    WITHOUT_ADJUSTMENT = "wo-a"

    @classmethod
    def from_flag(cls, flag: str) -> "CellVariant":
        for variant in cls:
            if variant.value == flag:
                return variant
        options = ", ".join(v.value for v in cls)
        raise ValueError(f"unknown cell variant {flag!r} (expected one of {options})")


@dataclass
class DecoderState:
    """Hidden and cell vectors plus the decaying DA feature vector s."""

    h: Node
    c: Node
    s: Node


@dataclass
class StepResult:
    state: DecoderState
    logits: Node
    attention: Node


def initial_state(g: Graph, hidden: int, features: np.ndarray) -> DecoderState:
    return DecoderState(
        h=g.input(np.zeros(hidden), name="dec_h0"),
        c=g.input(np.zeros(hidden), name="dec_c0"),
        s=g.input(features, name="da_features"),
    )


def refine(g: Graph, params: "ModelParams", w_embed: Node, d: Node,
           h_prev: Node) -> tuple[Node, Node]:
    """Gate the token embedding: r = sigmoid(W_rd d + W_rh h_prev), x = r * w."""
    r = g.sigmoid(g.add(g.matmul(params.refine_d_W, d),
                        g.matmul(params.refine_h_W, h_prev)))
    return g.mul(r, w_embed), r


def lstm_step(g: Graph, params: "ModelParams", x: Node, d: Node, h_prev: Node,
              c_prev: Node, r: Node | None) -> tuple[Node, Node, Node]:
    """DA-conditioned LSTM update; r is the refinement gate feeding the extra
    tanh cell term, or None to omit that term. Returns (h_tilde, c, o)."""
    n = params.hidden
    pre = g.add(g.matmul(params.lstm_W, g.concat(x, d, h_prev)), params.lstm_b)
    i = g.sigmoid(g.slice(pre, 0, n))
    f = g.sigmoid(g.slice(pre, n, 2 * n))
    o = g.sigmoid(g.slice(pre, 2 * n, 3 * n))
    c_hat = g.tanh(g.slice(pre, 3 * n, 4 * n))
    c = g.add(g.mul(f, c_prev), g.mul(i, c_hat))
    if r is not None:
        c = g.add(c, g.tanh(g.matmul(params.cell_refine_W, r)))
    h_tilde = g.mul(o, g.tanh(c))
    return h_tilde, c, o


def adjust(g: Graph, params: "ModelParams", x: Node, h_tilde: Node,
           s_prev: Node, o: Node) -> tuple[Node, Node]:
    """Decay the DA vector and read the remainder back into the output space.

    a = sigmoid(W_ax x + W_ah h_tilde); s = s_prev * a;
    c_a = sigmoid(W_os s); h_a = o * tanh(c_a). Returns (s, h_a).
    """
    a = g.sigmoid(g.add(g.matmul(params.adjust_x_W, x),
                        g.matmul(params.adjust_h_W, h_tilde)))
    s = g.mul(s_prev, a)
    c_a = g.sigmoid(g.matmul(params.out_da_W, s))
    h_a = g.mul(o, g.tanh(c_a))
    return s, h_a


def decoder_step(g: Graph, params: "ModelParams", state: DecoderState,
                 token_id: int, enc: EncodedDa, variant: CellVariant,
                 dropout_in: Node | None = None,
                 dropout_out: Node | None = None) -> StepResult:
    """One decode step: attention, refinement, cell update, adjustment, logits.

    Dropout masks (inverted-dropout scaled, supplied by the trainer) apply to
    the token embedding and to the pre-output hidden state only; the
    recurrent state stays clean.
    """
    w_embed = g.select_row(params.token_emb, token_id)
    if dropout_in is not None:
        w_embed = g.mul(w_embed, dropout_in)

    weights, context = attend(g, params, enc.states, state.h, enc.attn_keys)
    d = da_representation(g, enc.act_node, context)

    if variant is CellVariant.WITHOUT_REFINEMENT:
        x, r = w_embed, None
    else:
        x, r = refine(g, params, w_embed, d, state.h)

    h_tilde, c, o = lstm_step(g, params, x, d, state.h, state.c, r)

    if variant is CellVariant.WITHOUT_ADJUSTMENT:
        h, s = h_tilde, state.s
    else:
        s, h_a = adjust(g, params, x, h_tilde, state.s, o)
        h = g.add(h_tilde, h_a)

    pre_out = g.mul(h, dropout_out) if dropout_out is not None else h
    logits = g.matmul(params.out_hidden_W, pre_out)
    return StepResult(DecoderState(h, c, s), logits, weights)


def s_trace(model: "NLGModel", da, tokens: list[str]) -> tuple[list[str], np.ndarray]:
    """DA feature vector values after each step of re-decoding `tokens`.

    Returns (feature names, matrix) with one row per token; every column is
    nonincreasing because s is only ever multiplied by gates in (0, 1).
    """
    from .model import encode_for_decoding  # deferred: model imports this module

    g = Graph(model.params.registry)
    enc, state = encode_for_decoding(g, model, da)
    # The step that generates token t consumes token t-1 (BOS first), so the
    # trace has exactly one row of s per generated token.
    ids = [model.vocab.BOS_ID] + model.vocab.encode(tokens[:-1]) if tokens else []
    rows = []
    for token_id in ids:
        result = decoder_step(g, model.params, state, token_id, enc, model.variant)
        state = result.state
        rows.append(state.s.value.copy())
    matrix = np.asarray(rows) if rows else np.zeros((0, model.schema.feature_size))
    return model.schema.feature_names(), matrix


def write_s_trace(path, names: list[str], matrix: np.ndarray) -> None:
    """Delimited text export of an s trace, header row first."""
    lines = ["\t".join(names)]
    lines += ["\t".join(f"{v:.10g}" for v in row) for row in matrix]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
