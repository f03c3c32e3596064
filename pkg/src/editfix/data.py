"""Dataset ingestion: JSONL pairs -> tokenized examples with cached gold edits."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bpe import Vocab, encode_batch
from .diffing import derive_edits
from .grammar import serialize, tokens_to_ids

log = logging.getLogger(__name__)


class IngestError(ValueError):
    """Malformed input data; the message carries the line number."""


@dataclass
class Example:
    """One tokenized repair pair with its derived gold editing sequence."""

    id: str
    x_ids: list[int]
    y_ids: list[int]
    edit_ids: list[int]


@dataclass
class RepairDataset:
    splits: dict[str, list[Example]]
    filtered_overlength: int = 0
    counts: dict[str, int] = field(default_factory=dict)


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise IngestError(f"{path}:{lineno}: malformed JSON ({e})") from e
    return rows


def write_jsonl(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True))
            f.write("\n")


def ingest(pairs: list[dict], vocab: Vocab, max_len: int = 512) -> tuple[list[Example], int]:
    """Tokenize pairs, derive gold edit programs, and drop over-length pairs.

    A pair is filtered (and counted) when its buggy sequence exceeds the
    location budget or its serialized editing sequence exceeds the decoder
    budget. Returns (examples, filtered_count).
    """
    for i, row in enumerate(pairs):
        if "buggy" not in row or "fixed" not in row:
            raise IngestError(f"pair {i}: missing 'buggy' or 'fixed' field")
    xs = encode_batch(vocab, [row["buggy"] for row in pairs])
    ys = encode_batch(vocab, [row["fixed"] for row in pairs])
    examples: list[Example] = []
    filtered = 0
    for i, (row, x, y) in enumerate(zip(pairs, xs, ys)):
        if len(x) > max_len:
            filtered += 1
            continue
        program = derive_edits(x, y, max_len=max_len)
        edit_tokens = serialize(program)
        if len(edit_tokens) - 1 > max_len:
            filtered += 1
            continue
        examples.append(Example(
            id=str(row.get("id", i)),
            x_ids=x,
            y_ids=y,
            edit_ids=tokens_to_ids(edit_tokens, vocab),
        ))
    if filtered:
        log.info("ingest filtered %d over-length pairs of %d", filtered, len(pairs))
    return examples, filtered


def split_pairs(pairs: list[dict], fractions: tuple[float, float, float],
                seed: int) -> dict[str, list[dict]]:
    """Deterministic disjoint train/valid/test split by shuffled position."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise IngestError(f"split fractions {fractions} do not sum to 1")
    rng = np.random.default_rng([seed, 31337])
    perm = rng.permutation(len(pairs))
    n_train = int(round(fractions[0] * len(pairs)))
    n_valid = int(round(fractions[1] * len(pairs)))
    order = [pairs[int(i)] for i in perm]
    return {
        "train": order[:n_train],
        "valid": order[n_train : n_train + n_valid],
        "test": order[n_train + n_valid :],
    }


def examples_to_rows(examples: list[Example]) -> list[dict]:
    return [
        {"id": e.id, "x_ids": e.x_ids, "y_ids": e.y_ids, "edit_ids": e.edit_ids}
        for e in examples
    ]


def rows_to_examples(rows: list[dict]) -> list[Example]:
    return [
        Example(id=str(r["id"]), x_ids=list(r["x_ids"]), y_ids=list(r["y_ids"]),
                edit_ids=list(r["edit_ids"]))
        for r in rows
    ]
