"""Corpus-level BLEU and slot-error-rate evaluation.

BLEU is corpus BLEU-4: clipped n-gram counts pooled over all hypothesis/
reference-group pairs, geometric mean of the four precisions, and a brevity
penalty against the closest reference length. Zero precisions are floored
at a tiny epsilon so a hypothesis set with no 4-gram overlap scores near
(not exactly) zero; absolute deltas up to about 0.01 BLEU against other
toolkits' smoothing variants are expected and documented.

Slot error is aggregated two ways: corpus-level (sum of missing and
redundant over the sum of required, the headline number) and the mean of
per-DA rates over DAs that require at least one slot token.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .corpus import DialogueAct, DomainSchema, tokenize
from .generation import BeamConfig, NLGModel, SlotError, generate, slot_err

BLEU_EPS = 1e-9
BLEU_ORDER = 4


@dataclass
class BleuResult:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hypothesis_length: int
    reference_length: int


@dataclass
class ErrResult:
    corpus: float
    mean: float
    total_missing: int
    total_redundant: int
    total_required: int
    per_da: list[SlotError] = field(default_factory=list)


@dataclass
class EvalReport:
    bleu: BleuResult
    err: ErrResult
    groups: int
    breakdown: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "bleu": self.bleu.score,
            "bleu_precisions": self.bleu.precisions,
            "brevity_penalty": self.bleu.brevity_penalty,
            "err_corpus": self.err.corpus,
            "err_mean": self.err.mean,
            "missing": self.err.total_missing,
            "redundant": self.err.total_redundant,
            "required": self.err.total_required,
            "groups": self.groups,
            "breakdown": self.breakdown,
        }


def _ngrams(tokens: list[str], order: int) -> Counter:
    return Counter(tuple(tokens[i:i + order]) for i in range(len(tokens) - order + 1))


def corpus_bleu(hypotheses: list[str], reference_groups: list[list[str]]) -> BleuResult:
    """Case-insensitive corpus BLEU-4 with multiple references per position."""
    if not hypotheses:
        raise ValueError("corpus_bleu: empty hypothesis set")
    if len(hypotheses) != len(reference_groups):
        raise ValueError(f"corpus_bleu: {len(hypotheses)} hypotheses vs "
                         f"{len(reference_groups)} reference groups")

    matched = [0] * BLEU_ORDER
    total = [0] * BLEU_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, refs in zip(hypotheses, reference_groups):
        if not refs:
            raise ValueError("corpus_bleu: empty reference group")
        hyp_tokens = hyp.lower().split()
        ref_token_lists = [r.lower().split() for r in refs]
        hyp_len += len(hyp_tokens)
        ref_len += min((abs(len(r) - len(hyp_tokens)), len(r))
                       for r in ref_token_lists)[1]
        for order in range(1, BLEU_ORDER + 1):
            counts = _ngrams(hyp_tokens, order)
            if not counts:
                continue
            max_ref = Counter()
            for ref_tokens in ref_token_lists:
                for gram, count in _ngrams(ref_tokens, order).items():
                    if count > max_ref[gram]:
                        max_ref[gram] = count
            total[order - 1] += sum(counts.values())
            matched[order - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())

    precisions = [(m / t if t else 0.0) for m, t in zip(matched, total)]
    if hyp_len == 0:
        return BleuResult(0.0, precisions, 0.0, 0, ref_len)
    # Orders with no n-grams anywhere (corpus shorter than the order) are
    # excluded from the geometric mean so that a perfect short hypothesis
    # still scores 1; orders present but unmatched are floored at epsilon.
    logs = [math.log(max(m / t, BLEU_EPS))
            for m, t in zip(matched, total) if t > 0]
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    score = bp * math.exp(sum(logs) / len(logs)) if logs else 0.0
    return BleuResult(score, precisions, bp, hyp_len, ref_len)


def corpus_err(candidate_token_lists: list[list[str]], das: list[DialogueAct],
               schema: DomainSchema) -> ErrResult:
    """Aggregate slot error over aligned candidate/DA lists."""
    if len(candidate_token_lists) != len(das):
        raise ValueError(f"corpus_err: {len(candidate_token_lists)} candidates vs "
                         f"{len(das)} DAs")
    per_da = [slot_err(tokens, da, schema)
              for tokens, da in zip(candidate_token_lists, das)]
    missing = sum(e.missing for e in per_da)
    redundant = sum(e.redundant for e in per_da)
    required = sum(e.required for e in per_da)
    corpus = (missing + redundant) / required if required else 0.0
    rated = [e.err for e in per_da if e.required > 0]
    mean = sum(rated) / len(rated) if rated else 0.0
    return ErrResult(corpus, mean, missing, redundant, required, per_da)


def group_by_da(pairs: list[tuple[DialogueAct, str]],
                ) -> list[tuple[DialogueAct, list[str]]]:
    """Group references under their canonical DA string, first-seen order."""
    groups: dict[str, tuple[DialogueAct, list[str]]] = {}
    order: list[str] = []
    for da, ref in pairs:
        key = da.render()
        if key not in groups:
            groups[key] = (da, [])
            order.append(key)
        refs = groups[key][1]
        if ref not in refs:
            refs.append(ref)
    return [groups[k] for k in order]


def evaluate_model(model: NLGModel, pairs: list[tuple[DialogueAct, str]],
                   config: BeamConfig) -> EvalReport:
    """Generate the top realization for each distinct DA and score the set."""
    groups = group_by_da(pairs)
    hypotheses: list[str] = []
    reference_groups: list[list[str]] = []
    token_lists: list[list[str]] = []
    das: list[DialogueAct] = []
    breakdown: list[dict] = []
    for da, refs in groups:
        output = generate(model, da, config)
        best = output.candidates[0]
        hypotheses.append(best.text)
        reference_groups.append([" ".join(tokenize(r)) for r in refs])
        token_lists.append(best.tokens)
        das.append(da)
        breakdown.append({
            "da": da.render(),
            "output": best.text,
            "cost": best.cost,
            "err": best.err,
            "missing": best.missing,
            "redundant": best.redundant,
        })
    bleu = corpus_bleu(hypotheses, reference_groups)
    err = corpus_err(token_lists, das, model.schema)
    return EvalReport(bleu, err, len(groups), breakdown)
