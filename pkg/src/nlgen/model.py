"""Model parameters, initialization, checkpoints, and full forward passes.

The dimension plan makes the decoder's fused gate matrix square: slot and
value embeddings have dimension hidden/2 so a pair embedding has dimension
hidden, the act embedding has dimension hidden so the DA representation has
dimension 2*hidden, and the concatenated decoder input (token, DA
representation, previous hidden) is exactly 4*hidden.

Checkpoints are a versioned container: an 8-byte magic, a little-endian
uint64 header length, a JSON header (format version, hyperparameters,
schema, vocabulary and its hash, tensor manifest), then the named parameter
tensors as raw little-endian float64 in manifest order. See
docs/checkpoint-format.md for the byte-level layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node, ParamSet
from .corpus import (DataError, DialogueAct, DomainSchema, Vocab,
                     encode_da_features)
from .decoder import CellVariant, DecoderState, decoder_step, initial_state
from .encoder import EncodedDa, encode_da

CHECKPOINT_MAGIC = b"NLGNCK01"
CHECKPOINT_FORMAT_VERSION = 1

INIT_SCALE = 0.08
FORGET_BIAS = 1.0


class ModelParams:
    """All weight matrices and embedding tables, registered by name."""

    def __init__(self, hidden: int, vocab: Vocab, schema: DomainSchema,
                 rng: np.random.Generator | None,
                 pretrained_embeddings: dict[str, np.ndarray] | None = None):
        if hidden % 2 != 0 or hidden <= 0:
            raise ValueError(f"hidden size must be a positive even number, got {hidden}")
        self.hidden = hidden
        n = hidden
        m = hidden // 2
        n_features = schema.feature_size

        def init(*shape):
            if rng is None:
                return np.zeros(shape)
            return rng.uniform(-INIT_SCALE, INIT_SCALE, shape)

        def lstm_bias():
            b = np.zeros(4 * n)
            b[n:2 * n] = FORGET_BIAS
            return b

        ps = ParamSet()
        self.registry = ps
        self.token_emb = ps.add("token_emb", init(len(vocab.tokens), n))
        self.slot_emb = ps.add("slot_emb", init(len(vocab.slots), m))
        self.value_emb = ps.add("value_emb", init(len(vocab.values), m))
        self.act_emb = ps.add("act_emb", init(len(vocab.acts), n))
        self.enc_fwd_W = ps.add("enc_fwd_W", init(4 * n, 2 * n))
        self.enc_fwd_b = ps.add("enc_fwd_b", lstm_bias())
        self.enc_bwd_W = ps.add("enc_bwd_W", init(4 * n, 2 * n))
        self.enc_bwd_b = ps.add("enc_bwd_b", lstm_bias())
        self.attn_key_W = ps.add("attn_key_W", init(n, n))
        self.attn_query_W = ps.add("attn_query_W", init(n, n))
        self.attn_score_v = ps.add("attn_score_v", init(1, n))
        self.refine_d_W = ps.add("refine_d_W", init(n, 2 * n))
        self.refine_h_W = ps.add("refine_h_W", init(n, n))
        self.lstm_W = ps.add("lstm_W", init(4 * n, 4 * n))
        self.lstm_b = ps.add("lstm_b", lstm_bias())
        self.cell_refine_W = ps.add("cell_refine_W", init(n, n))
        self.adjust_x_W = ps.add("adjust_x_W", init(n_features, n))
        self.adjust_h_W = ps.add("adjust_h_W", init(n_features, n))
        self.out_da_W = ps.add("out_da_W", init(n, n_features))
        self.out_hidden_W = ps.add("out_hidden_W", init(len(vocab.tokens), n))

        if pretrained_embeddings:
            hits = 0
            for token, idx in vocab.tokens.items():
                vec = pretrained_embeddings.get(token)
                if vec is not None and vec.shape == (n,):
                    self.token_emb.value[idx] = vec
                    hits += 1
            self.pretrained_hits = hits
        else:
            self.pretrained_hits = 0


@dataclass
class NLGModel:
    """A trained (or trainable) generator: parameters plus their context."""

    params: ModelParams
    vocab: Vocab
    schema: DomainSchema
    variant: CellVariant

    @property
    def hidden(self) -> int:
        return self.params.hidden

    @classmethod
    def create(cls, hidden: int, vocab: Vocab, schema: DomainSchema,
               variant: CellVariant = CellVariant.FULL, seed: int = 0,
               pretrained_embeddings: dict[str, np.ndarray] | None = None) -> "NLGModel":
        rng = np.random.default_rng(seed)
        params = ModelParams(hidden, vocab, schema, rng, pretrained_embeddings)
        return cls(params, vocab, schema, variant)

    # -- checkpoint i/o ---------------------------------------------------

    def save(self, path: str | Path) -> None:
        names = sorted(self.params.registry.names())
        header = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "hidden": self.hidden,
            "variant": self.variant.value,
            "schema": self.schema.to_json_dict(),
            "vocab": self.vocab.to_json_dict(),
            "vocab_hash": self.vocab.content_hash(),
            "tensors": [{"name": n, "shape": list(self.params.registry[n].value.shape)}
                        for n in names],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for name in names:
                arr = np.ascontiguousarray(self.params.registry[name].value, dtype="<f8")
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "NLGModel":
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        if raw[:8] != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        (header_len,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + header_len])
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint format version "
                            f"{header.get('format_version')}")
        vocab = Vocab.from_json_dict(header["vocab"])
        if vocab.content_hash() != header["vocab_hash"]:
            raise DataError(
                f"{path}: vocabulary hash mismatch — the stored vocabulary does not "
                f"match the hash recorded at save time; the checkpoint is corrupt "
                f"or was edited")
        schema = DomainSchema.from_json_dict(header["schema"])
        params = ModelParams(header["hidden"], vocab, schema, rng=None)
        offset = 16 + header_len
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            offset += count * 8
            params.registry[spec["name"]].value[...] = arr.reshape(shape)
        if offset != len(raw):
            raise DataError(f"{path}: trailing bytes after tensor data")
        return cls(params, vocab, schema, CellVariant.from_flag(header["variant"]))


# ---------------------------------------------------------------------------
# Full forward passes


def encode_for_decoding(g: Graph, model: NLGModel,
                        da: DialogueAct) -> tuple[EncodedDa, DecoderState]:
    """Encoder pass plus a fresh decoder state seeded with the DA features."""
    enc = encode_da(g, model.params, da, model.vocab, model.schema)
    features = encode_da_features(da, model.schema)
    return enc, initial_state(g, model.hidden, features)


def teacher_forced_logits(g: Graph, model: NLGModel, da: DialogueAct,
                          target_ids: list[int],
                          dropout_masks: list[tuple[Node | None, Node | None]] | None = None,
                          ) -> list[Node]:
    """Logit nodes for each target position under teacher forcing.

    Step t consumes target t-1 (BOS first) and yields the logits scored
    against target t; dropout_masks, when given, supplies per-step
    (embedding mask, output mask) input nodes.
    """
    enc, state = encode_for_decoding(g, model, da)
    inputs = [model.vocab.BOS_ID] + list(target_ids[:-1])
    logits: list[Node] = []
    for t, token_id in enumerate(inputs):
        mask_in, mask_out = dropout_masks[t] if dropout_masks else (None, None)
        result = decoder_step(g, model.params, state, token_id, enc, model.variant,
                              dropout_in=mask_in, dropout_out=mask_out)
        state = result.state
        logits.append(result.logits)
    return logits
