"""Sequence NLL training: per-sentence SGD with unrolled backpropagation.

Each sentence is its own mini-batch; the weight-decay term joins every
fifth example's update (or, in "accumulated" mode, joins with its
coefficient scaled by the cadence). Gradients are clipped to a global norm
before each step, dropout is applied through inverted-dropout masks on the
non-recurrent connections, early stopping watches validation loss, and the
checkpoint kept is the one with the highest validation BLEU (greedy decode,
computed every `eval_every` epochs).
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node, NumericError, grad_check, sgd_step
from .corpus import (DataError, DatasetSplits, DialogueAct, DomainSchema,
                     SlotSpec, SlotValue, Vocab, delexicalize, lexicalize,
                     tokenize)
from .decoder import CellVariant
from .encoder import load_embedding_file
from .evaluation import corpus_bleu, evaluate_model, group_by_da
from .generation import BeamConfig, beam_search
from .model import NLGModel, teacher_forced_logits

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration; the message lists every problem found."""


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss or gradient; carries the partial report
    and the model restored to its last good parameters."""

    def __init__(self, message: str, report: "TrainReport", model: NLGModel):
        super().__init__(message)
        self.report = report
        self.model = model


@dataclass
class TrainConfig:
    hidden: int = 80
    learning_rate: float = 0.1
    lr_decay: float = 0.5
    l2: float = 1e-5
    l2_cadence: int = 5
    l2_mode: str = "fifth-example"  # or "accumulated": coefficient scaled by cadence
    dropout: float = 0.7
    dropout_scope: str = "io"  # io | input | output
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    variant: CellVariant = CellVariant.FULL
    grad_clip: float = 5.0
    eval_every: int = 1
    max_tokens: int = 80
    embeddings: str | None = None

    def validate(self) -> list[str]:
        problems = []
        if self.hidden <= 0 or self.hidden % 2:
            problems.append(f"hidden must be a positive even number, got {self.hidden}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.lr_decay <= 1:
            problems.append(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.l2 < 0:
            problems.append(f"l2 must be >= 0, got {self.l2}")
        if self.l2_cadence < 1:
            problems.append(f"l2_cadence must be >= 1, got {self.l2_cadence}")
        if self.l2_mode not in ("fifth-example", "accumulated"):
            problems.append(f"l2_mode must be fifth-example or accumulated, got {self.l2_mode!r}")
        if not 0 <= self.dropout < 1:
            problems.append(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dropout_scope not in ("io", "input", "output"):
            problems.append(f"dropout_scope must be io, input or output, got {self.dropout_scope!r}")
        if self.max_epochs < 1:
            problems.append(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            problems.append(f"patience must be >= 1, got {self.patience}")
        if self.grad_clip <= 0:
            problems.append(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.eval_every < 1:
            problems.append(f"eval_every must be >= 1, got {self.eval_every}")
        if self.max_tokens < 1:
            problems.append(f"max_tokens must be >= 1, got {self.max_tokens}")
        return problems

    def to_json_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(data)
        if "variant" in kwargs and not isinstance(kwargs["variant"], CellVariant):
            kwargs["variant"] = CellVariant.from_flag(kwargs["variant"])
        return cls(**kwargs)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float  # per-token
    valid_loss: float  # per-token
    valid_bleu: float | None
    learning_rate: float
    l2_updates: int


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_valid_bleu: float = 0.0
    best_checkpoint_path: str | None = None
    seed: int = 0
    l2_updates: int = 0
    diverged: bool = False

    def to_json_dict(self) -> dict:
        return {
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "best_valid_bleu": self.best_valid_bleu,
            "best_checkpoint_path": self.best_checkpoint_path,
            "seed": self.seed,
            "l2_updates": self.l2_updates,
            "diverged": self.diverged,
        }


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.stale = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


# ---------------------------------------------------------------------------
# Example preparation


@dataclass
class Example:
    da: DialogueAct
    tokens: list[str]
    target_ids: list[int]


def delexicalize_split(pairs: list[tuple[DialogueAct, str]],
                       schema: DomainSchema) -> list[tuple[DialogueAct, list[str]]]:
    return [(da, delexicalize(text, da, schema).tokens) for da, text in pairs]


def build_vocab(delexed: list[tuple[DialogueAct, list[str]]],
                schema: DomainSchema) -> Vocab:
    return Vocab.build([tokens for _, tokens in delexed],
                       [da for da, _ in delexed], schema)


def make_examples(delexed: list[tuple[DialogueAct, list[str]]],
                  vocab: Vocab) -> list[Example]:
    return [Example(da, tokens, vocab.encode(tokens) + [vocab.EOS_ID])
            for da, tokens in delexed]


# ---------------------------------------------------------------------------
# Loss


def sequence_nll(g: Graph, logits: list[Node], target_ids: list[int]) -> Node:
    """Sum over steps of the negative log probability of each target token."""
    if len(logits) != len(target_ids):
        raise ValueError(f"sequence_nll: {len(logits)} logit vectors vs "
                         f"{len(target_ids)} targets")
    loss: Node | None = None
    for logit, target in zip(logits, target_ids):
        probs = g.softmax(logit)
        if probs.value[target] <= 1e-12:
            logger.warning("sequence_nll: clamped zero probability for target %d", target)
        term = g.neg(g.log(g.select_row(probs, int(target))))
        loss = term if loss is None else g.add(loss, term)
    return loss


def _dropout_masks(g: Graph, rng: np.random.Generator, steps: int, hidden: int,
                   rate: float, scope: str) -> list[tuple[Node | None, Node | None]] | None:
    if rate <= 0:
        return None
    keep = 1.0 - rate

    def mask() -> Node:
        return g.input((rng.random(hidden) < keep).astype(np.float64) / keep)

    want_in = scope in ("io", "input")
    want_out = scope in ("io", "output")
    return [(mask() if want_in else None, mask() if want_out else None)
            for _ in range(steps)]


# ---------------------------------------------------------------------------
# Training loop


def _validation_loss(model: NLGModel, examples: list[Example]) -> float:
    total, tokens = 0.0, 0
    for ex in examples:
        g = Graph(model.params.registry)
        logits = teacher_forced_logits(g, model, ex.da, ex.target_ids)
        loss = sequence_nll(g, logits, ex.target_ids)
        total += float(loss.value)
        tokens += len(ex.target_ids)
    return total / max(tokens, 1)


def _validation_bleu(model: NLGModel, groups: list[tuple[DialogueAct, list[str]]],
                     config: BeamConfig) -> float:
    hyps, refs = [], []
    for da, references in groups:
        candidates = beam_search(model, da, config)
        text, _ = lexicalize(candidates[0].tokens, da)
        hyps.append(text)
        refs.append([" ".join(tokenize(r)) for r in references])
    return corpus_bleu(hyps, refs).score


def train(splits: DatasetSplits, schema: DomainSchema, config: TrainConfig,
          checkpoint_path: str | Path | None = None,
          log_path: str | Path | None = None,
          initial_model: NLGModel | None = None) -> tuple[NLGModel, TrainReport]:
    """Train a model on the given splits; returns it at its best-BLEU epoch.

    Deterministic for a fixed config: initialization, shuffling, and dropout
    all derive from config.seed. Passing initial_model warm-starts from an
    existing checkpoint (its vocabulary, schema, and variant are kept), the
    adaptation protocol for fine-tuning on a new domain. Raises
    TrainingDiverged (carrying the report and the last good parameters) on a
    non-finite loss or gradient.
    """
    problems = config.validate()
    if problems:
        raise ConfigError("invalid training configuration:\n  " + "\n  ".join(problems))
    if not splits.train or not splits.valid:
        raise DataError("training requires nonempty train and validation splits")

    if initial_model is not None:
        if initial_model.hidden != config.hidden:
            raise ConfigError(f"warm-start checkpoint has hidden={initial_model.hidden}, "
                              f"config asks for {config.hidden}")
        model = initial_model
        schema = model.schema
        vocab = model.vocab
        delexed_train = delexicalize_split(splits.train, schema)
    else:
        delexed_train = delexicalize_split(splits.train, schema)
        vocab = build_vocab(delexed_train, schema)
        embeddings = load_embedding_file(config.embeddings) if config.embeddings else None
        model = NLGModel.create(config.hidden, vocab, schema, config.variant,
                                config.seed, embeddings)
    train_examples = make_examples(delexed_train, vocab)
    valid_examples = make_examples(delexicalize_split(splits.valid, schema), vocab)
    valid_groups = group_by_da(splits.valid)
    greedy = BeamConfig(beam_width=1, overgen=1, top_k=1, err_penalty=0.0,
                        max_tokens=config.max_tokens)

    # Separate stream from parameter init so shuffling/dropout draws do not
    # perturb initialization for the same seed.
    rng = np.random.default_rng((config.seed, 1))
    registry = model.params.registry
    report = TrainReport(seed=config.seed)
    stopper = EarlyStopper(config.patience)
    lr = config.learning_rate
    best_bleu = -1.0
    best_state = registry.state()
    last_good = registry.state()
    example_counter = 0
    log_file = open(log_path, "a") if log_path else None

    def log_line(stats: EpochStats) -> None:
        bleu = "-" if stats.valid_bleu is None else f"{stats.valid_bleu:.4f}"
        line = (f"epoch={stats.epoch} train_loss={stats.train_loss:.6f} "
                f"valid_loss={stats.valid_loss:.6f} valid_bleu={bleu} "
                f"lr={stats.learning_rate:.6g} l2_updates={stats.l2_updates}")
        logger.info(line)
        if log_file:
            log_file.write(line + "\n")
            log_file.flush()

    try:
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(len(train_examples))
            epoch_loss, epoch_tokens, epoch_l2 = 0.0, 0, 0
            for idx in order:
                ex = train_examples[idx]
                g = Graph(registry)
                masks = _dropout_masks(g, rng, len(ex.target_ids), config.hidden,
                                       config.dropout, config.dropout_scope)
                logits = teacher_forced_logits(g, model, ex.da, ex.target_ids, masks)
                loss = sequence_nll(g, logits, ex.target_ids)
                loss_value = float(loss.value)
                if not np.isfinite(loss_value):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                g.backward(loss)
                registry.clip_grad_norm(config.grad_clip)
                example_counter += 1
                apply_l2 = config.l2 > 0 and example_counter % config.l2_cadence == 0
                coeff = config.l2 * (config.l2_cadence
                                     if config.l2_mode == "accumulated" else 1)
                sgd_step(registry, lr, coeff, apply_l2)
                epoch_l2 += int(apply_l2)
                epoch_loss += loss_value
                epoch_tokens += len(ex.target_ids)

            valid_loss = _validation_loss(model, valid_examples)
            evaluate_bleu = (epoch % config.eval_every == 0 or epoch == config.max_epochs)
            valid_bleu = _validation_bleu(model, valid_groups, greedy) if evaluate_bleu else None
            if valid_bleu is not None and valid_bleu > best_bleu:
                best_bleu = valid_bleu
                best_state = registry.state()
                report.best_epoch = epoch

            stats = EpochStats(epoch, epoch_loss / epoch_tokens, valid_loss,
                               valid_bleu, lr, epoch_l2)
            report.epochs.append(stats)
            report.l2_updates += epoch_l2
            log_line(stats)

            improved = stopper.update(valid_loss)
            if not improved:
                lr *= config.lr_decay
            last_good = registry.state()
            report.stopped_epoch = epoch
            if stopper.should_stop:
                logger.info("early stop at epoch %d (no improvement for %d epochs)",
                            epoch, config.patience)
                break
    except NumericError as exc:
        registry.load_state(best_state if best_bleu >= 0 else last_good)
        report.diverged = True
        if checkpoint_path:
            model.save(checkpoint_path)
            report.best_checkpoint_path = str(checkpoint_path)
        raise TrainingDiverged(str(exc), report, model) from exc
    finally:
        if log_file:
            log_file.close()

    if best_bleu < 0:  # BLEU was never evaluated (eval_every > epochs run)
        best_bleu = _validation_bleu(model, valid_groups, greedy)
        best_state = registry.state()
        report.best_epoch = report.stopped_epoch
    report.best_valid_bleu = best_bleu
    registry.load_state(best_state)
    if checkpoint_path:
        model.save(checkpoint_path)
        report.best_checkpoint_path = str(checkpoint_path)
    return model, report


# ---------------------------------------------------------------------------
# Multi-seed protocol


@dataclass
class SeedRun:
    seed: int
    valid_bleu: float
    test_bleu: float
    test_err_corpus: float
    test_err_mean: float
    stopped_epoch: int
    checkpoint_path: str | None


@dataclass
class MultiSeedReport:
    runs: list[SeedRun]
    selected_index: int
    mean_test_bleu: float
    max_test_bleu: float
    mean_test_err_corpus: float
    mean_test_err_mean: float

    def to_json_dict(self) -> dict:
        return {
            "runs": [dataclasses.asdict(r) for r in self.runs],
            "selected_index": self.selected_index,
            "mean_test_bleu": self.mean_test_bleu,
            "max_test_bleu": self.max_test_bleu,
            "mean_test_err_corpus": self.mean_test_err_corpus,
            "mean_test_err_mean": self.mean_test_err_mean,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")


def run_multi_seed(splits: DatasetSplits, schema: DomainSchema, config: TrainConfig,
                   k: int, eval_config: BeamConfig | None = None,
                   out_dir: str | Path | None = None) -> MultiSeedReport:
    """Train k independently seeded models; report each run's test metrics,
    their mean, and the run selected by highest validation BLEU."""
    if k < 1:
        raise ConfigError(f"number of seeds must be >= 1, got {k}")
    eval_config = eval_config or BeamConfig(max_tokens=config.max_tokens)
    out_dir = Path(out_dir) if out_dir else None
    runs: list[SeedRun] = []
    for i in range(k):
        run_config = dataclasses.replace(config, seed=config.seed + i)
        ckpt = out_dir / f"seed-{run_config.seed}.ckpt" if out_dir else None
        model, rep = train(splits, schema, run_config, checkpoint_path=ckpt)
        test_pairs = splits.test or splits.valid
        eval_report = evaluate_model(model, test_pairs, eval_config)
        runs.append(SeedRun(run_config.seed, rep.best_valid_bleu,
                            eval_report.bleu.score, eval_report.err.corpus,
                            eval_report.err.mean, rep.stopped_epoch,
                            str(ckpt) if ckpt else None))
    selected = max(range(k), key=lambda i: runs[i].valid_bleu)
    report = MultiSeedReport(
        runs=runs,
        selected_index=selected,
        mean_test_bleu=sum(r.test_bleu for r in runs) / k,
        max_test_bleu=max(r.test_bleu for r in runs),
        mean_test_err_corpus=sum(r.test_err_corpus for r in runs) / k,
        mean_test_err_mean=sum(r.test_err_mean for r in runs) / k,
    )
    if out_dir:
        report.write(out_dir / "multi-seed.json")
    return report


# ---------------------------------------------------------------------------
# Full-model gradient checking


def _tampered_identity(g: Graph, x: Node) -> Node:
    """Identity with a deliberately wrong backward pass (negative control)."""

    def fwd():
        return x.value.copy()

    def bwd(out: Node):
        x.grad += 1.01 * out.grad

    return g._push("tampered-identity", (x,), fwd, bwd)


def gradcheck_model_fixture(hidden: int = 4, pairs: int = 3,
                            variant: CellVariant = CellVariant.FULL,
                            seed: int = 0, scale: float = 0.5,
                            ) -> tuple[NLGModel, DialogueAct]:
    """Tiny deterministic model + DA for finite-difference checking.

    Weights are redrawn at a larger scale than the training init: with the
    production 0.08 init, deep-path gradients at n=4 sink to ~1e-10 where
    central-difference roundoff dominates the relative-error denominator.
    """
    schema = DomainSchema(
        name="gradcheck",
        acts=("confirm", "inform", "request"),
        slots=tuple(SlotSpec(s) for s in ("area", "food", "name", "near", "price")),
    )
    slot_names = [s.name for s in schema.slots]
    values = ["cheap", "kebab", "northern"]
    rng = np.random.default_rng(seed)
    chosen = [SlotValue(slot_names[int(rng.integers(len(slot_names)))],
                        values[int(rng.integers(len(values)))])
              for _ in range(pairs)]
    da = DialogueAct("inform", tuple(chosen))
    vocab = Vocab.build([["and", "the", "with"]], [da], schema)
    model = NLGModel.create(hidden, vocab, schema, variant, seed)
    for name, param in model.params.registry.items():
        if not name.endswith("_b"):
            param.value[...] = rng.uniform(-scale, scale, param.value.shape)
    return model, da


def gradcheck_full_model(variant: CellVariant = CellVariant.FULL, hidden: int = 4,
                         pairs: int = 3, steps: int = 3, seed: int = 0,
                         epsilon: float = 5e-4, tamper: bool = False) -> float:
    """Max relative error of the full encoder+aligner+decoder gradient
    against central finite differences on a tiny random instance.

    The checked scalar is the sequence NLL times 2**-4: a power-of-two
    scale is exact in floating point, so it changes no relative error while
    shrinking the loss spacing that bounds finite-difference roundoff.
    (Shift-invariance of the attention softmax makes some query-weight
    gradients genuinely ~1e-9; they sit at the relative-error floor, where
    the check would otherwise measure pure subtraction noise.)
    """
    model, da = gradcheck_model_fixture(hidden, pairs, variant, seed)
    rng = np.random.default_rng(seed + 1)
    content_ids = list(range(4, len(model.vocab.tokens)))
    target_ids = [int(rng.choice(content_ids)) for _ in range(steps - 1)]
    target_ids.append(model.vocab.EOS_ID)

    def build(g: Graph) -> Node:
        logits = teacher_forced_logits(g, model, da, target_ids)
        loss = g.scale(sequence_nll(g, logits, target_ids), 2.0 ** -4)
        return _tampered_identity(g, loss) if tamper else loss

    return grad_check(build, model.params.registry, epsilon)
