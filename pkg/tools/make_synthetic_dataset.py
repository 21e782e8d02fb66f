#!/usr/bin/env python3
"""Regenerate the bundled synthetic 'cafe' domain (deterministic).

Sixty examples over 3 act types and 6 slots, each DA pattern realized by
exactly one surface template so that a small model can memorize the mapping
and held-out value combinations stay template-covered. Run from the repo
root: python tools/make_synthetic_dataset.py
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from nlgen.corpus import DialogueAct, SlotValue, lexicalize  # noqa: E402

OUT_DIR = Path(__file__).resolve().parents[1] / "src" / "nlgen" / "data" / "cafe"

SCHEMA = {
    "name": "cafe",
    "acts": ["goodbye", "inform", "recommend"],
    "slots": [
        {"name": "area", "delexicalizable": True},
        {"name": "food", "delexicalizable": True},
        {"name": "name", "delexicalizable": True},
        {"name": "parking", "delexicalizable": False},
        {"name": "pricerange", "delexicalizable": True},
        {"name": "rating", "delexicalizable": True},
    ],
}

NAMES = ["blue bayou", "golden fork", "cafe verde", "the daily grind", "mama rosa",
         "harbor house", "night owl", "sunrise corner", "velvet room", "old mill"]
FOODS = ["italian", "thai", "mexican", "vegan", "seafood", "french"]
AREAS = ["north side", "city centre", "old town", "riverside"]
PRICES = ["cheap", "moderate", "expensive"]
RATINGS = ["3", "4", "5"]

TEMPLATES = {
    "serves": "SLOT_NAME serves SLOT_FOOD food .",
    "located": "SLOT_NAME is located in the SLOT_AREA and the prices are SLOT_PRICERANGE .",
    "parking_yes": "SLOT_NAME offers parking .",
    "parking_no": "SLOT_NAME does not offer parking .",
    "rated": "i would recommend SLOT_NAME , it is rated SLOT_RATING out of 5 .",
    "try": "try SLOT_NAME for SLOT_FOOD food in the SLOT_AREA .",
    "goodbye": "thank you , goodbye .",
    "price": "SLOT_NAME is in the SLOT_PRICERANGE price range .",
}


def build_examples() -> list[tuple[str, DialogueAct, str]]:
    examples = []

    def add(kind: str, act: str, pairs: list[tuple[str, str]]):
        da = DialogueAct(act, tuple(SlotValue(s, v) for s, v in pairs))
        reference, unmatched = lexicalize(TEMPLATES[kind].split(), da)
        assert not unmatched, (kind, pairs)
        examples.append((kind, da, reference))

    for i in range(12):
        add("serves", "inform",
            [("name", NAMES[i % 10]), ("food", FOODS[i % 6])])
    for i in range(10):
        add("located", "inform",
            [("name", NAMES[(3 * i + 1) % 10]), ("area", AREAS[i % 4]),
             ("pricerange", PRICES[i % 3])])
    for i in range(4):
        add("parking_yes", "inform", [("name", NAMES[(2 * i) % 10]), ("parking", "yes")])
    for i in range(4):
        add("parking_no", "inform", [("name", NAMES[(2 * i + 1) % 10]), ("parking", "no")])
    for i in range(9):
        add("rated", "recommend",
            [("name", NAMES[(7 * i + 2) % 10]), ("rating", RATINGS[i % 3])])
    for i in range(9):
        add("try", "recommend",
            [("name", NAMES[(9 * i + 4) % 10]), ("food", FOODS[(i + 3) % 6]),
             ("area", AREAS[(i + 1) % 4])])
    for _ in range(2):
        add("goodbye", "goodbye", [])
    for i in range(10):
        add("price", "inform",
            [("name", NAMES[(6 * i + 5) % 10]), ("pricerange", PRICES[(i + 1) % 3])])
    assert len(examples) == 60
    return examples


def main() -> None:
    examples = build_examples()
    rng = np.random.default_rng(20240601)
    order = rng.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    train, valid, test = shuffled[:36], shuffled[36:48], shuffled[48:]

    train_kinds = {kind for kind, _, _ in train}
    missing = {kind for kind, _, _ in examples} - train_kinds
    assert not missing, f"templates absent from the train split: {missing}"

    OUT_DIR.mkdir(parents=True, exist_ok=True)
    (OUT_DIR / "schema.json").write_text(json.dumps(SCHEMA, indent=2) + "\n")
    for split_name, rows in (("train", train), ("valid", valid), ("test", test)):
        payload = [[da.render(), reference] for _, da, reference in rows]
        (OUT_DIR / f"{split_name}.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"wrote 36/12/12 examples to {OUT_DIR}")


if __name__ == "__main__":
    main()
