"""Over-generation by beam search and reranking by cost plus slot errors.

Beam search produces up to `overgen` delexicalized candidates per DA; each
carries its exact model cost F (the summed negative log probability of the
emitted tokens, including the end token when one was generated). Candidates
are then scored R = F + penalty * err, where err counts missing and
redundant slot tokens against the DA, so with a large penalty any candidate
realizing all slots outranks every candidate that does not.

Generation is read-only over the model; many DAs may be processed
concurrently, while per-DA expansion stays single-threaded for determinism.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Graph, softmax_values
from .corpus import (DialogueAct, DomainSchema, Vocab, lexicalize, parse_da,
                     slot_of_token)
from .decoder import decoder_step, s_trace
from .model import NLGModel, encode_for_decoding


@dataclass
class BeamConfig:
    beam_width: int = 10
    overgen: int = 20
    top_k: int = 5
    err_penalty: float = 1000.0
    max_tokens: int = 80

    def validate(self) -> list[str]:
        problems = []
        if self.beam_width < 1:
            problems.append(f"beam_width must be >= 1, got {self.beam_width}")
        if self.overgen < 1:
            problems.append(f"overgen must be >= 1, got {self.overgen}")
        if not 1 <= self.top_k <= self.overgen:
            problems.append(f"top_k must be in [1, overgen={self.overgen}], got {self.top_k}")
        if self.err_penalty < 0:
            problems.append(f"err_penalty must be >= 0, got {self.err_penalty}")
        if self.max_tokens < 1:
            problems.append(f"max_tokens must be >= 1, got {self.max_tokens}")
        return problems


@dataclass
class SlotError:
    """Missing/redundant slot-token counts for one candidate against one DA."""

    err: float
    missing: int
    redundant: int
    required: int


@dataclass
class Candidate:
    """A delexicalized hypothesis with model cost and rerank bookkeeping."""

    tokens: list[str]
    cost: float
    terminated: bool = True
    err: float = 0.0
    missing: int = 0
    redundant: int = 0
    score: float = 0.0
    text: str = ""

    def key(self) -> tuple:
        return (self.score, self.cost, tuple(self.tokens))


def slot_err(tokens: list[str], da: DialogueAct, schema: DomainSchema) -> SlotError:
    """(missing + redundant) / required slot-token count for one candidate.

    Required counts come from the DA's delexicalizable pairs with duplicate
    slots counted by multiplicity; special-valued slots (yes/no/none/
    dontcare) never surface as slot tokens and are excluded entirely. A DA
    requiring no slot tokens scores 0 by convention.
    """
    required = Counter(p.slot for p in da.delexicalizable_pairs(schema))
    emitted = Counter(s for s in (slot_of_token(t) for t in tokens) if s is not None)
    missing = sum(max(0, count - emitted.get(slot, 0)) for slot, count in required.items())
    redundant = sum(max(0, count - required.get(slot, 0)) for slot, count in emitted.items())
    total = sum(required.values())
    err = (missing + redundant) / total if total else 0.0
    return SlotError(err, missing, redundant, total)


@dataclass
class _Hypothesis:
    cost: float
    tokens: tuple[int, ...]
    state: object
    log_probs: np.ndarray


def beam_search(model: NLGModel, da: DialogueAct, config: BeamConfig) -> list[Candidate]:
    """Collect up to `overgen` lowest-cost candidates by width-limited search.

    Hypotheses end when they emit the end token (cost includes that step) or
    when they reach max_tokens (cost covers emitted tokens only). With a
    width of at least |vocab|^max_tokens this degenerates to exhaustive
    enumeration, which is what the brute-force tests rely on.
    """
    vocab = model.vocab
    banned = {vocab.PAD_ID, vocab.BOS_ID, vocab.UNK_ID}
    g = Graph(model.params.registry)
    enc, state0 = encode_for_decoding(g, model, da)

    def expand(state, token_id: int) -> tuple[object, np.ndarray]:
        result = decoder_step(g, model.params, state, token_id, enc, model.variant)
        with np.errstate(divide="ignore"):
            log_probs = np.log(softmax_values(result.logits.value))
        log_probs[list(banned)] = -np.inf
        return result.state, log_probs

    root_state, root_lp = expand(state0, vocab.BOS_ID)
    live = [_Hypothesis(0.0, (), root_state, root_lp)]
    done: list[tuple[float, tuple[int, ...], bool]] = []

    for _ in range(config.max_tokens):
        if not live:
            break
        continuations: list[tuple[float, tuple[int, ...], _Hypothesis, int]] = []
        for hyp in live:
            for token_id, lp in enumerate(hyp.log_probs):
                if not np.isfinite(lp):
                    continue
                cost = hyp.cost - lp
                if token_id == vocab.EOS_ID:
                    done.append((cost, hyp.tokens, True))
                else:
                    continuations.append((cost, hyp.tokens + (token_id,), hyp, token_id))
        continuations.sort(key=lambda c: (c[0], c[1]))
        live = []
        for cost, tokens, parent, token_id in continuations[:config.beam_width]:
            state, log_probs = expand(parent.state, token_id)
            live.append(_Hypothesis(cost, tokens, state, log_probs))

    done.extend((hyp.cost, hyp.tokens, False) for hyp in live)
    done.sort(key=lambda d: (d[0], d[1]))
    return [Candidate(tokens=vocab.decode(list(ids)), cost=cost, terminated=terminated)
            for cost, ids, terminated in done[:config.overgen]]


def rescore(model: NLGModel, da: DialogueAct, candidate: Candidate) -> float:
    """Independent forward-pass cost of a candidate's token sequence.

    Terminated candidates paid for their end token, truncated ones did not,
    so the rescoring target sequence appends the end token only for the
    former."""
    from .training import sequence_nll  # local import: trainer owns the loss op
    from .model import teacher_forced_logits

    g = Graph(model.params.registry)
    target_ids = model.vocab.encode(candidate.tokens)
    if candidate.terminated:
        target_ids = target_ids + [model.vocab.EOS_ID]
    logits = teacher_forced_logits(g, model, da, target_ids)
    loss = sequence_nll(g, logits, target_ids)
    return float(loss.value)


def rerank(candidates: list[Candidate], err_penalty: float,
           top_k: int | None = None) -> list[Candidate]:
    """Order ascending by R = F + penalty * err; ties by F, then tokens."""
    scored = [replace(c, score=c.cost + err_penalty * c.err) for c in candidates]
    scored.sort(key=Candidate.key)
    return scored if top_k is None else scored[:top_k]


@dataclass
class GenerationOutput:
    da: DialogueAct
    candidates: list[Candidate]
    trace_names: list[str] = field(default_factory=list)
    trace: np.ndarray | None = None


def generate(model: NLGModel, da: DialogueAct | str, config: BeamConfig,
             with_trace: bool = False) -> GenerationOutput:
    """Full pipeline: parse, over-generate, score slots, rerank, lexicalize."""
    if isinstance(da, str):
        da = parse_da(da)
    candidates = beam_search(model, da, config)
    for cand in candidates:
        counts = slot_err(cand.tokens, da, model.schema)
        cand.err = counts.err
        cand.missing = counts.missing
        cand.redundant = counts.redundant
    top = rerank(candidates, config.err_penalty, config.top_k)
    for cand in top:
        cand.text, _ = lexicalize(cand.tokens, da)
    out = GenerationOutput(da, top)
    if with_trace and top:
        out.trace_names, out.trace = s_trace(model, da, top[0].tokens)
    return out
