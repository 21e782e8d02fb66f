"""Command-line entry point: train, generate, evaluate, gradcheck, inspect.

Every command works inside a run directory (--out): it takes an exclusive
lockfile, writes its outputs there, and always leaves a manifest.json with
the fully resolved configuration, seed, dataset hash, checkpoint path, and
command line, so any run can be replayed exactly. Configuration precedence
is command-line flags over config-file values over built-in defaults.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .autodiff import NumericError
from .corpus import (DaParseError, DataError, DatasetSplits, DomainSchema,
                     SchemaError, SlotSpec, dataset_hash, delexicalize,
                     lexicalize, load_dataset, load_schema, tokenize,
                     write_delex_cache)
from .decoder import CellVariant, write_s_trace
from .evaluation import evaluate_model
from .generation import BeamConfig, generate
from .model import NLGModel
from .training import (ConfigError, TrainConfig, TrainingDiverged,
                       gradcheck_full_model, run_multi_seed, train)

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_MAX_HIDDEN = 8


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run directories and manifests


class RunDir:
    """Exclusive working directory for one command invocation."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock_fd: int | None = None

    def __enter__(self) -> "RunDir":
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / ".lock"
        try:
            self._lock_fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(
                f"run directory {self.path} is in use (lockfile {lock} exists); "
                f"concurrent runs must use distinct directories") from None
        return self

    def __exit__(self, *exc):
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            (self.path / ".lock").unlink(missing_ok=True)
        return False

    def write_manifest(self, command: str, argv: list[str], config: dict,
                       seed: int | None, data_hash: str | None,
                       checkpoint: str | None, **extra) -> None:
        manifest = {
            "command": command,
            "argv": argv,
            "config": config,
            "seed": seed,
            "dataset_hash": data_hash,
            "checkpoint": checkpoint,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "version": __version__,
        }
        manifest.update(extra)
        path = self.path / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Configuration resolution

_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_BEAM_KEYS = {f.name for f in dataclasses.fields(BeamConfig)}


def resolve_configs(config_path: str | None,
                    overrides: dict) -> tuple[TrainConfig, BeamConfig]:
    """defaults < config file < command-line overrides; all errors at once."""
    train_data = TrainConfig().to_json_dict()
    beam_data = dataclasses.asdict(BeamConfig())
    if config_path:
        try:
            file_data = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from exc
        unknown = sorted(set(file_data) - _TRAIN_KEYS - _BEAM_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys in {config_path}: {', '.join(unknown)}")
        for key, value in file_data.items():
            (train_data if key in _TRAIN_KEYS else beam_data)[key] = value
    for key, value in overrides.items():
        if value is None:
            continue
        (train_data if key in _TRAIN_KEYS else beam_data)[key] = value

    problems = []
    try:
        train_config = TrainConfig.from_json_dict(train_data)
    except (ConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    beam_config = BeamConfig(**beam_data)
    problems += train_config.validate()
    problems += beam_config.validate()
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return train_config, beam_config


def resolved_dict(train_config: TrainConfig, beam_config: BeamConfig) -> dict:
    out = train_config.to_json_dict()
    out.update(dataclasses.asdict(beam_config))
    return out


# ---------------------------------------------------------------------------
# Data helpers


def merge_schemas(schemas: list[DomainSchema]) -> DomainSchema:
    if len(schemas) == 1:
        return schemas[0]
    acts = sorted({a for s in schemas for a in s.acts})
    slot_delex: dict[str, bool] = {}
    for schema in schemas:
        for slot in schema.slots:
            slot_delex[slot.name] = slot_delex.get(slot.name, False) or slot.delexicalizable
    slots = tuple(SlotSpec(name, slot_delex[name]) for name in sorted(slot_delex))
    return DomainSchema("+".join(s.name for s in schemas), tuple(acts), slots)


def load_data(data_dirs: list[str], schema_path: str | None,
              need_schema: bool = True) -> tuple[DatasetSplits, DomainSchema | None]:
    if not data_dirs:
        raise UsageError("at least one --data directory is required")
    splits_list = [load_dataset(d) for d in data_dirs]
    merged = DatasetSplits(
        train=[p for s in splits_list for p in s.train],
        valid=[p for s in splits_list for p in s.valid],
        test=[p for s in splits_list for p in s.test],
    )
    schema: DomainSchema | None = None
    if schema_path:
        schema = load_schema(schema_path)
    else:
        candidates = [Path(d) / "schema.json" for d in data_dirs]
        present = [c for c in candidates if c.exists()]
        if present:
            schema = merge_schemas([load_schema(c) for c in present])
        elif need_schema:
            raise DataError(
                "no domain schema found: pass --schema or place schema.json in "
                "the dataset directory")
    return merged, schema


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args, argv: list[str]) -> int:
    overrides = {
        "hidden": args.hidden, "dropout": args.dropout, "seed": args.seed,
        "variant": args.variant, "learning_rate": args.lr,
        "max_epochs": args.epochs, "patience": args.patience,
        "eval_every": args.eval_every, "l2": args.l2,
        "embeddings": args.embeddings, "max_tokens": args.max_tokens,
        "beam_width": args.beam, "overgen": args.overgen,
        "top_k": args.top_k, "err_penalty": args.err_penalty,
    }
    train_config, beam_config = resolve_configs(args.config, overrides)
    splits, schema = load_data(args.data, args.schema)

    initial_model = None
    if args.init_from:
        initial_model = NLGModel.load(args.init_from)
        schema = initial_model.schema
        if initial_model.hidden != train_config.hidden:
            raise ConfigError(
                f"--init-from checkpoint has hidden={initial_model.hidden}, "
                f"config asks for {train_config.hidden}")

    with RunDir(args.out) as run:
        data_hash = dataset_hash(args.data)
        checkpoint = run.path / "checkpoint.ckpt"
        log_path = run.path / "train.log"
        try:
            if args.seeds > 1:
                report = run_multi_seed(splits, schema, train_config, args.seeds,
                                        eval_config=beam_config, out_dir=run.path)
                selected = report.runs[report.selected_index]
                (run.path / "report.json").write_text(
                    json.dumps(report.to_json_dict(), indent=2) + "\n")
                checkpoint_path = selected.checkpoint_path
                print(f"multi-seed: selected seed {selected.seed} "
                      f"(valid BLEU {selected.valid_bleu:.4f}); "
                      f"mean test BLEU {report.mean_test_bleu:.4f}, "
                      f"mean test ERR {report.mean_test_err_corpus:.4f}")
            else:
                model, report = train(splits, schema, train_config,
                                      checkpoint_path=checkpoint, log_path=log_path,
                                      initial_model=initial_model)
                (run.path / "report.json").write_text(
                    json.dumps(report.to_json_dict(), indent=2) + "\n")
                checkpoint_path = str(checkpoint)
                print(f"trained {report.stopped_epoch} epochs; best valid BLEU "
                      f"{report.best_valid_bleu:.4f} at epoch {report.best_epoch}; "
                      f"checkpoint {checkpoint}")
        except TrainingDiverged as exc:
            (run.path / "report.json").write_text(
                json.dumps(exc.report.to_json_dict(), indent=2) + "\n")
            run.write_manifest("train", argv, resolved_dict(train_config, beam_config),
                               train_config.seed, data_hash,
                               exc.report.best_checkpoint_path, data=args.data)
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return 3
        run.write_manifest("train", argv, resolved_dict(train_config, beam_config),
                           train_config.seed, data_hash, checkpoint_path,
                           data=args.data)
    return 0


def cmd_generate(args, argv: list[str]) -> int:
    model = NLGModel.load(args.checkpoint)
    _, beam_config = resolve_configs(args.config, {
        "beam_width": args.beam, "overgen": args.overgen, "top_k": args.top_k,
        "err_penalty": args.err_penalty, "max_tokens": args.max_tokens,
    })
    try:
        da_lines = [line.strip() for line in Path(args.da_file).read_text().splitlines()]
    except OSError as exc:
        raise DataError(f"cannot read DA file {args.da_file}: {exc}") from exc
    da_lines = [line for line in da_lines if line and not line.startswith("#")]

    with RunDir(args.out) as run:
        records = ["da\trank\ttext\tcost\terr\tscore"]
        trace_dir = run.path / "straces"
        for i, line in enumerate(da_lines):
            output = generate(model, line, beam_config, with_trace=args.s_trace)
            for rank, cand in enumerate(output.candidates, start=1):
                records.append(f"{output.da.render()}\t{rank}\t{cand.text}\t"
                               f"{cand.cost:.6f}\t{cand.err:.6f}\t{cand.score:.6f}")
            if args.s_trace and output.trace is not None:
                trace_dir.mkdir(exist_ok=True)
                write_s_trace(trace_dir / f"da-{i:04d}.tsv",
                              output.trace_names, output.trace)
        out_file = run.path / "generations.tsv"
        out_file.write_text("\n".join(records) + "\n")
        run.write_manifest("generate", argv, dataclasses.asdict(beam_config),
                           None, None, str(args.checkpoint),
                           da_file=str(args.da_file))
        for line in records[1:]:
            print(line)
    return 0


def cmd_evaluate(args, argv: list[str]) -> int:
    _, beam_config = resolve_configs(args.config, {
        "beam_width": args.beam, "overgen": args.overgen, "top_k": args.top_k,
        "err_penalty": args.err_penalty, "max_tokens": args.max_tokens,
    })
    if not args.data:
        raise UsageError("at least one --data directory is required")
    checkpoints = args.checkpoints
    if not args.per_seed and len(checkpoints) > 1:
        raise UsageError("multiple checkpoints require --per-seed")

    with RunDir(args.out) as run:
        rows = []  # (domain, checkpoint, report)
        for data_dir in args.data:
            splits = load_dataset(data_dir)
            pairs = getattr(splits, args.split)
            if not pairs:
                raise DataError(f"{data_dir}: split {args.split!r} is empty")
            domain = Path(data_dir).name
            for ckpt in checkpoints:
                model = NLGModel.load(ckpt)
                report = evaluate_model(model, pairs, beam_config)
                rows.append((domain, ckpt, report))

        lines = ["domain\tcheckpoint\tbleu\terr_corpus\terr_mean\tgroups"]
        print(f"{'domain':<16} {'bleu':>8} {'err_corpus':>11} {'err_mean':>9} {'groups':>7}")
        for domain, ckpt, report in rows:
            lines.append(f"{domain}\t{ckpt}\t{report.bleu.score:.4f}\t"
                         f"{report.err.corpus:.4f}\t{report.err.mean:.4f}\t{report.groups}")
            print(f"{domain:<16} {report.bleu.score:>8.4f} {report.err.corpus:>11.4f} "
                  f"{report.err.mean:>9.4f} {report.groups:>7}")
        if args.per_seed and len(checkpoints) > 1:
            for domain in dict.fromkeys(d for d, _, _ in rows):
                sub = [r for d, _, r in rows if d == domain]
                mean_bleu = sum(r.bleu.score for r in sub) / len(sub)
                mean_corpus = sum(r.err.corpus for r in sub) / len(sub)
                mean_mean = sum(r.err.mean for r in sub) / len(sub)
                lines.append(f"{domain}\tmean\t{mean_bleu:.4f}\t{mean_corpus:.4f}\t"
                             f"{mean_mean:.4f}\t{sub[0].groups}")
                print(f"{domain + ' (mean)':<16} {mean_bleu:>8.4f} {mean_corpus:>11.4f} "
                      f"{mean_mean:>9.4f} {sub[0].groups:>7}")
        (run.path / "report.tsv").write_text("\n".join(lines) + "\n")
        (run.path / "report.json").write_text(json.dumps(
            [{"domain": d, "checkpoint": str(c), **r.to_json_dict()}
             for d, c, r in rows], indent=2) + "\n")
        run.write_manifest("evaluate", argv, dataclasses.asdict(beam_config),
                           None, dataset_hash(args.data),
                           ",".join(str(c) for c in checkpoints), data=args.data,
                           split=args.split)
    return 0


def cmd_gradcheck(args, argv: list[str]) -> int:
    if args.hidden > GRADCHECK_MAX_HIDDEN:
        raise UsageError(f"gradcheck is for small dims: --hidden must be <= "
                         f"{GRADCHECK_MAX_HIDDEN}, got {args.hidden}")
    failed = False
    results = {}
    for variant in CellVariant:
        err = gradcheck_full_model(variant=variant, hidden=args.hidden,
                                   pairs=args.pairs, steps=args.steps,
                                   seed=args.seed, epsilon=args.epsilon,
                                   tamper=args.corrupt)
        ok = err < GRADCHECK_TOLERANCE
        failed = failed or not ok
        results[variant.value] = err
        print(f"variant={variant.value} max_rel_err={err:.3e} "
              f"{'PASS' if ok else 'FAIL'}")
    if args.out:
        with RunDir(args.out) as run:
            run.write_manifest("gradcheck", argv,
                               {"hidden": args.hidden, "pairs": args.pairs,
                                "steps": args.steps, "epsilon": args.epsilon},
                               args.seed, None, None, results=results)
    if failed:
        print("error: gradient check failed", file=sys.stderr)
        return 3
    return 0


def cmd_inspect(args, argv: list[str]) -> int:
    splits, schema = load_data(args.data, args.schema, need_schema=False)
    print(f"train/valid/test: {splits.counts[0]} / {splits.counts[1]} / {splits.counts[2]}")
    summary = {"counts": list(splits.counts)}
    if schema is not None:
        print(f"schema {schema.name!r}: {len(schema.acts)} act types, "
              f"{len(schema.slots)} slots")
        summary["schema"] = schema.to_json_dict()
        total, clean = 0, 0
        failures = []
        cache_entries = []
        for da, text in splits.train + splits.valid + splits.test:
            delexed = delexicalize(text, da, schema)
            cache_entries.append((da, delexed.tokens))
            realized, _ = lexicalize(delexed.tokens, da)
            total += 1
            if delexed.unmatched:
                failures.append({"da": da.render(), "text": text,
                                 "reason": "values not found verbatim: "
                                 + ", ".join(o.value for o in delexed.unmatched)})
            elif realized.split() != tokenize(text):
                failures.append({"da": da.render(), "text": text,
                                 "reason": f"round trip produced: {realized}"})
            else:
                clean += 1
        print(f"delexicalize/lexicalize round trip: {clean}/{total} clean")
        for failure in failures[:args.max_failures]:
            print(f"  FAIL {failure['da']}: {failure['reason']}")
        if len(failures) > args.max_failures:
            print(f"  ... and {len(failures) - args.max_failures} more")
        summary["round_trip"] = {"clean": clean, "total": total, "failures": failures}
        if args.cache:
            write_delex_cache(args.cache, cache_entries)
            print(f"wrote delexicalized cache to {args.cache}")
    if args.out:
        with RunDir(args.out) as run:
            (run.path / "inspect.json").write_text(json.dumps(summary, indent=2) + "\n")
            run.write_manifest("dataset-inspect", argv, {}, None,
                               dataset_hash(args.data), None, data=args.data)
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_beam_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int, default=None, help="beam width (default 10)")
    p.add_argument("--overgen", type=int, default=None,
                   help="candidates to over-generate (default 20)")
    p.add_argument("--top-k", type=int, default=None,
                   help="candidates kept after reranking (default 5)")
    p.add_argument("--lambda", dest="err_penalty", type=float, default=None,
                   help="slot-error penalty weight in reranking (default 1000)")
    p.add_argument("--max-tokens", type=int, default=None,
                   help="hard cap on generated length (default 80)")


def build_parser() -> _Parser:
    parser = _Parser(prog="nlgen", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"nlgen {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train a generator")
    p.add_argument("--data", action="append", default=[],
                   help="dataset directory (repeatable to merge domains)")
    p.add_argument("--schema", default=None, help="domain schema JSON file")
    p.add_argument("--config", default=None, help="config file (JSON key-value)")
    p.add_argument("--out", default="run-train", help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", type=int, default=1,
                   help="train this many seeds and select by validation BLEU")
    p.add_argument("--variant", choices=[v.value for v in CellVariant], default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--embeddings", default=None,
                   help="pretrained token embedding text file")
    p.add_argument("--init-from", default=None,
                   help="warm-start from an existing checkpoint (adaptation)")
    _add_beam_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate utterances for a file of DAs")
    p.add_argument("checkpoint")
    p.add_argument("--da-file", required=True, help="text file, one DA per line")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="run-generate")
    p.add_argument("--s-trace", action="store_true",
                   help="export the DA-vector trace of each top candidate")
    _add_beam_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="BLEU and slot error rate on a split")
    p.add_argument("checkpoints", nargs="+", metavar="checkpoint")
    p.add_argument("--data", action="append", default=[], required=False)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="run-evaluate")
    p.add_argument("--per-seed", action="store_true",
                   help="evaluate several checkpoints and add a mean row")
    _add_beam_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--pairs", type=int, default=3)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=5e-4)
    p.add_argument("--out", default="run-gradcheck")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dataset-inspect", help="split counts and round-trip report")
    p.add_argument("--data", action="append", default=[])
    p.add_argument("--schema", default=None)
    p.add_argument("--cache", default=None,
                   help="write the delexicalized corpus cache to this file")
    p.add_argument("--max-failures", type=int, default=10)
    p.add_argument("--out", default="run-inspect")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, DaParseError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
