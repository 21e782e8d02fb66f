"""Dialogue-act parsing, delexicalization, vocabularies, and dataset loading.

A dialogue act is an act type plus an ordered list of slot-value pairs, e.g.
``inform(name="bar crudo"; food="raw food")``. Text preprocessing replaces
slot values with placeholder tokens (SLOT_NAME, SLOT_FOOD, ...) so the
generator learns templates; lexicalization substitutes the values back.

Datasets are directories of JSON files where each entry is an array whose
first two elements are the dialogue-act string and a reference sentence,
either pre-split as train.json/valid.json/test.json or one file split by a
ratio. Everything here is pure over immutable inputs and safe to run in
parallel over corpus shards.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SPECIAL_VALUES = ("none", "yes", "no", "dontcare")
_SPECIAL_ALIASES = {
    "none": "none",
    "yes": "yes",
    "no": "no",
    "dontcare": "dontcare",
    "dont_care": "dontcare",
    "don't care": "dontcare",
    "do not care": "dontcare",
}

SLOT_TOKEN_PREFIX = "SLOT_"

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"

_PUNCT_RE = re.compile(r"([.,!?;:()])")
_IDENT_RE = re.compile(r"[A-Za-z0-9_.\-+]")


class DaParseError(ValueError):
    """Malformed dialogue-act string; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class SchemaError(ValueError):
    """Act type or slot not present in the domain schema."""


class DataError(ValueError):
    """Dataset files missing, malformed, or inconsistent."""


# ---------------------------------------------------------------------------
# Dialogue acts


@dataclass(frozen=True)
class SlotValue:
    slot: str
    value: str

    @property
    def is_special(self) -> bool:
        return self.value in SPECIAL_VALUES


@dataclass(frozen=True)
class DialogueAct:
    """An act type with ordered slot-value pairs; duplicates are permitted."""

    act_type: str
    pairs: tuple[SlotValue, ...] = ()
    question: bool = False

    def render(self) -> str:
        """Canonical string form; parse_da(render()) reproduces the act."""
        body = "; ".join(f'{p.slot}="{p.value}"' for p in self.pairs)
        prefix = "?" if self.question else ""
        return f"{prefix}{self.act_type}({body})"

    def delexicalizable_pairs(self, schema: "DomainSchema | None" = None) -> list[SlotValue]:
        """Pairs whose value is realized as a slot token rather than lexically."""
        out = []
        for p in self.pairs:
            if p.is_special or not p.value:
                continue
            if schema is not None and not schema.is_delexicalizable(p.slot):
                continue
            out.append(p)
        return out


def normalize_value(raw: str) -> str:
    value = raw.strip()
    return _SPECIAL_ALIASES.get(value.lower(), value)


def parse_da(text: str) -> DialogueAct:
    """Parse ``act(slot1=value1; slot2=value2; ...)`` into a DialogueAct.

    Values may be single- or double-quoted or bare; separators are ';' or
    ','; a leading '?' marks the question form; value-less slots get the
    special value "none". Raises DaParseError with a byte offset.
    """
    i, n = 0, len(text)

    def skip_ws():
        nonlocal i
        while i < n and text[i].isspace():
            i += 1

    skip_ws()
    question = False
    if i < n and text[i] == "?":
        question = True
        i += 1
    start = i
    while i < n and _IDENT_RE.match(text[i]):
        i += 1
    act = text[start:i]
    skip_ws()
    if not act:
        raise DaParseError("empty act type", start)
    if i >= n or text[i] != "(":
        raise DaParseError("expected '(' after act type", i)
    i += 1

    pairs: list[SlotValue] = []
    while True:
        skip_ws()
        if i >= n:
            raise DaParseError("unbalanced parentheses: missing ')'", n)
        if text[i] == ")":
            i += 1
            break
        slot_start = i
        while i < n and _IDENT_RE.match(text[i]):
            i += 1
        slot = text[slot_start:i]
        if not slot:
            raise DaParseError("expected slot name", i)
        skip_ws()
        value = "none"
        if i < n and text[i] == "=":
            i += 1
            skip_ws()
            if i < n and text[i] in "'\"":
                quote = text[i]
                quote_at = i
                i += 1
                val_start = i
                while i < n and text[i] != quote:
                    i += 1
                if i >= n:
                    raise DaParseError("unbalanced quote", quote_at)
                value = normalize_value(text[val_start:i])
                i += 1
            else:
                val_start = i
                while i < n and text[i] not in ";,)":
                    i += 1
                if i >= n:
                    raise DaParseError("unbalanced parentheses: missing ')'", n)
                value = normalize_value(text[val_start:i])
        pairs.append(SlotValue(slot.lower(), value))
        skip_ws()
        if i < n and text[i] in ";,":
            i += 1

    skip_ws()
    if i < n:
        raise DaParseError("unexpected trailing text after ')'", i)
    return DialogueAct(act.lower(), tuple(pairs), question)


def sort_pairs_for_encoder(da: DialogueAct) -> DialogueAct:
    """Stably order pairs by slot name (duplicates keep their relative order)."""
    return DialogueAct(da.act_type, tuple(sorted(da.pairs, key=lambda p: p.slot)),
                       da.question)


# ---------------------------------------------------------------------------
# Domain schema and feature vectors


@dataclass(frozen=True)
class SlotSpec:
    name: str
    delexicalizable: bool = True


@dataclass(frozen=True)
class DomainSchema:
    name: str
    acts: tuple[str, ...]
    slots: tuple[SlotSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "_act_index", {a: i for i, a in enumerate(self.acts)})
        object.__setattr__(self, "_slot_index", {s.name: i for i, s in enumerate(self.slots)})

    def act_index(self, act: str) -> int:
        try:
            return self._act_index[act]
        except KeyError:
            raise SchemaError(f"unknown act type {act!r} (schema {self.name!r})") from None

    def slot_index(self, slot: str) -> int:
        try:
            return self._slot_index[slot]
        except KeyError:
            raise SchemaError(f"unknown slot {slot!r} (schema {self.name!r})") from None

    def has_slot(self, slot: str) -> bool:
        return slot in self._slot_index

    def is_delexicalizable(self, slot: str) -> bool:
        return self.slots[self.slot_index(slot)].delexicalizable

    @property
    def feature_size(self) -> int:
        return len(self.acts) + len(self.slots)

    def feature_names(self) -> list[str]:
        return [f"act={a}" for a in self.acts] + [f"slot={s.name}" for s in self.slots]

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "acts": list(self.acts),
            "slots": [{"name": s.name, "delexicalizable": s.delexicalizable}
                      for s in self.slots],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DomainSchema":
        return cls(
            name=data["name"],
            acts=tuple(data["acts"]),
            slots=tuple(SlotSpec(s["name"], bool(s.get("delexicalizable", True)))
                        for s in data["slots"]),
        )


def load_schema(path: str | Path) -> DomainSchema:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read schema {path}: {exc}") from exc
    return DomainSchema.from_json_dict(data)


def encode_da_features(da: DialogueAct, schema: DomainSchema) -> np.ndarray:
    """Binary feature vector: one act-type bit plus one bit per distinct slot."""
    bits = np.zeros(schema.feature_size, dtype=np.float64)
    bits[schema.act_index(da.act_type)] = 1.0
    for p in da.pairs:
        bits[len(schema.acts) + schema.slot_index(p.slot)] = 1.0
    return bits


# ---------------------------------------------------------------------------
# Tokenization, delexicalization, lexicalization


def tokenize(text: str) -> list[str]:
    """Lowercase, pad punctuation with spaces, split on whitespace."""
    return _PUNCT_RE.sub(r" \1 ", text.lower()).split()


def slot_token(slot: str) -> str:
    return SLOT_TOKEN_PREFIX + slot.upper()


def slot_of_token(token: str) -> str | None:
    if token.startswith(SLOT_TOKEN_PREFIX) and len(token) > len(SLOT_TOKEN_PREFIX):
        return token[len(SLOT_TOKEN_PREFIX):].lower()
    return None


@dataclass(frozen=True)
class SlotOccurrence:
    """Where a pair's value was replaced; position is None when unmatched."""

    slot: str
    value: str
    position: int | None


@dataclass
class DelexicalizedUtterance:
    tokens: list[str]
    occurrences: list[SlotOccurrence]

    @property
    def unmatched(self) -> list[SlotOccurrence]:
        return [o for o in self.occurrences if o.position is None]


def _boundary_pattern(value: str) -> re.Pattern:
    quoted = re.escape(value)
    return re.compile(rf"(?<!\w){quoted}(?!\w)")


def delexicalize(text: str, da: DialogueAct,
                 schema: DomainSchema | None = None) -> DelexicalizedUtterance:
    """Replace each delexicalizable pair's value occurrence with a slot token.

    Matching is case-insensitive on word boundaries, one occurrence per pair,
    longest value first so overlapping values resolve to maximal coverage.
    Pairs whose value does not occur are reported as unmatched occurrences.
    """
    working = text.lower()
    candidates = da.delexicalizable_pairs(schema)
    order = sorted(range(len(candidates)), key=lambda k: -len(candidates[k].value))
    matched: dict[int, bool] = {}
    for k in order:
        pair = candidates[k]
        m = _boundary_pattern(pair.value.lower()).search(working)
        if m is None:
            matched[k] = False
            continue
        working = working[:m.start()] + f" \x00{k}\x00 " + working[m.end():]
        matched[k] = True

    tokens: list[str] = []
    positions: dict[int, int] = {}
    for raw in tokenize(working):
        if raw.startswith("\x00") and raw.endswith("\x00"):
            k = int(raw.strip("\x00"))
            positions[k] = len(tokens)
            tokens.append(slot_token(candidates[k].slot))
        else:
            tokens.append(raw)

    occurrences = [SlotOccurrence(p.slot, p.value, positions.get(k))
                   for k, p in enumerate(candidates)]
    occurrences.sort(key=lambda o: (o.position is None, o.position or 0))
    return DelexicalizedUtterance(tokens, occurrences)


def lexicalize(tokens: list[str], da: DialogueAct) -> tuple[str, list[int]]:
    """Substitute DA values back into slot tokens, in occurrence order.

    The k-th occurrence of SLOT_x consumes the k-th delexicalizable pair with
    slot x. Returns the realized string and the positions of slot tokens
    that had no pair left (kept verbatim; these feed the redundancy count).
    """
    queues: dict[str, list[str]] = {}
    for p in da.delexicalizable_pairs():
        queues.setdefault(p.slot, []).append(p.value)
    out: list[str] = []
    unmatched: list[int] = []
    for i, tok in enumerate(tokens):
        slot = slot_of_token(tok)
        if slot is not None and queues.get(slot):
            out.append(queues[slot].pop(0))
        else:
            if slot is not None:
                unmatched.append(i)
            out.append(tok)
    return " ".join(out), unmatched


# ---------------------------------------------------------------------------
# Vocabulary


@dataclass
class Vocab:
    """Token/slot/value/act index maps with dense, serialization-stable ids."""

    tokens: dict[str, int]
    slots: dict[str, int]
    values: dict[str, int]
    acts: dict[str, int]
    oov_counts: dict[str, int] = field(
        default_factory=lambda: {"token": 0, "slot": 0, "value": 0})

    PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

    @classmethod
    def build(cls, token_sequences: list[list[str]], das: list[DialogueAct],
              schema: DomainSchema) -> "Vocab":
        seen = {t for seq in token_sequences for t in seq}
        for slot in schema.slots:
            if slot.delexicalizable:
                seen.add(slot_token(slot.name))
        tokens = {PAD: 0, BOS: 1, EOS: 2, UNK: 3}
        for t in sorted(seen):
            tokens.setdefault(t, len(tokens))

        slots = {UNK: 0}
        for s in schema.slots:
            slots[s.name] = len(slots)

        value_set = set(SPECIAL_VALUES)
        for da in das:
            value_set.update(p.value.lower() for p in da.pairs)
        values = {UNK: 0}
        for v in sorted(value_set):
            values.setdefault(v, len(values))

        acts = {a: i for i, a in enumerate(schema.acts)}
        return cls(tokens, slots, values, acts)

    @classmethod
    def from_tokens(cls, extra_tokens: list[str], schema: DomainSchema) -> "Vocab":
        """Small fixed vocabulary for tests and gradient checks."""
        return cls.build([extra_tokens], [], schema)

    def __post_init__(self):
        self._id_token = {i: t for t, i in self.tokens.items()}

    def __len__(self) -> int:
        return len(self.tokens)

    def token_id(self, token: str) -> int:
        idx = self.tokens.get(token)
        if idx is None:
            self.oov_counts["token"] += 1
            return self.UNK_ID
        return idx

    def id_token(self, idx: int) -> str:
        return self._id_token[idx]

    def slot_id(self, slot: str) -> int:
        idx = self.slots.get(slot)
        if idx is None:
            self.oov_counts["slot"] += 1
            return self.slots[UNK]
        return idx

    def value_id(self, value: str) -> int:
        idx = self.values.get(value.lower())
        if idx is None:
            self.oov_counts["value"] += 1
            return self.values[UNK]
        return idx

    def act_id(self, act: str) -> int:
        try:
            return self.acts[act]
        except KeyError:
            raise SchemaError(f"unknown act type {act!r}") from None

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_id(t) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_token(i) for i in ids]

    def to_json_dict(self) -> dict:
        return {"tokens": self.tokens, "slots": self.slots,
                "values": self.values, "acts": self.acts}

    @classmethod
    def from_json_dict(cls, data: dict) -> "Vocab":
        return cls(dict(data["tokens"]), dict(data["slots"]),
                   dict(data["values"]), dict(data["acts"]))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class DatasetSplits:
    train: list[tuple[DialogueAct, str]]
    valid: list[tuple[DialogueAct, str]]
    test: list[tuple[DialogueAct, str]]

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


def _read_pairs(path: Path) -> list[tuple[DialogueAct, str]]:
    try:
        entries = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {path} at line {exc.lineno}") from exc
    if not isinstance(entries, list):
        raise DataError(f"{path}: expected a JSON array of [da, reference] entries")
    pairs = []
    for idx, entry in enumerate(entries):
        if not isinstance(entry, list) or len(entry) < 2:
            raise DataError(f"{path}: entry {idx} is not a [da, reference, ...] array")
        try:
            da = parse_da(str(entry[0]))
        except DaParseError as exc:
            raise DataError(f"{path}: entry {idx}: {exc}") from exc
        pairs.append((da, str(entry[1])))
    return pairs


def load_dataset(path: str | Path, ratio: tuple[int, int, int] = (3, 1, 1)) -> DatasetSplits:
    """Load a dataset directory (or single file) into train/valid/test splits.

    A directory with train.json/valid.json/test.json is loaded as-is. A
    single JSON file (or a directory holding exactly one data file besides
    schema.json) is split contiguously in file order by the given ratio.
    """
    path = Path(path)
    if path.is_file():
        return _split_by_ratio(_read_pairs(path), ratio)
    if not path.is_dir():
        raise DataError(f"no data at {path}")

    named = {name: path / f"{name}.json" for name in ("train", "valid", "test")}
    if all(p.exists() for p in named.values()):
        splits = DatasetSplits(*(_read_pairs(named[k]) for k in ("train", "valid", "test")))
    else:
        files = sorted(p for p in path.glob("*.json") if p.name != "schema.json")
        if not files:
            raise DataError(f"no data files found in {path}")
        if len(files) > 1:
            raise DataError(f"{path}: expected train/valid/test.json or a single "
                            f"data file, found {[f.name for f in files]}")
        splits = _split_by_ratio(_read_pairs(files[0]), ratio)
    logger.info("loaded %s: %d train / %d valid / %d test", path, *splits.counts)
    return splits


def _split_by_ratio(pairs: list[tuple[DialogueAct, str]],
                    ratio: tuple[int, int, int]) -> DatasetSplits:
    if not pairs:
        raise DataError("no data: dataset file is empty")
    total = sum(ratio)
    if total <= 0 or any(r < 0 for r in ratio):
        raise DataError(f"invalid split ratio {ratio}")
    n = len(pairs)
    n_train = n * ratio[0] // total
    n_valid = n * ratio[1] // total
    return DatasetSplits(pairs[:n_train],
                         pairs[n_train:n_train + n_valid],
                         pairs[n_train + n_valid:])


def dataset_hash(paths: list[str | Path]) -> str:
    """Stable content hash over the raw bytes of all dataset files."""
    digest = hashlib.sha256()
    for root in sorted(Path(p) for p in paths):
        files = [root] if root.is_file() else sorted(root.glob("*.json"))
        for f in files:
            digest.update(f.name.encode())
            digest.update(f.read_bytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Delexicalized corpus cache

_CACHE_HEADER = "nlgen-delex-cache\t1"


def write_delex_cache(path: str | Path,
                      entries: list[tuple[DialogueAct, list[str]]]) -> None:
    """Line-oriented cache: header, then one ``da-string TAB tokens`` per entry."""
    lines = [_CACHE_HEADER]
    lines += [f"{da.render()}\t{' '.join(tokens)}" for da, tokens in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_delex_cache(path: str | Path) -> list[tuple[DialogueAct, list[str]]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _CACHE_HEADER:
        raise DataError(f"{path}: not a delexicalized corpus cache (bad header)")
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            da_text, token_text = line.split("\t", 1)
        except ValueError:
            raise DataError(f"{path}: line {lineno}: expected DA TAB tokens") from None
        entries.append((parse_da(da_text), token_text.split()))
    return entries
