"""Byte-level BPE tokenizer with the action specials used by the edit language.

The alphabet is pre-seeded with all 256 byte values, so every input encodes
without an out-of-vocabulary path. Ids are laid out as bytes 0..255, then the
five specials, then merged tokens in creation order. Token strings are the
latin-1 decoding of their bytes, which makes the JSON vocabulary file exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels

SPECIAL_TOKENS = ("[BOS]", "[EOS]", "[PAD]", "[DELETE]", "[INSERT]")
N_BYTES = 256
MIN_VOCAB_SIZE = N_BYTES + len(SPECIAL_TOKENS)

VOCAB_SCHEMA_VERSION = 1


class TokenizerError(ValueError):
    """Configuration or input problem in tokenizer training or use."""


@dataclass(frozen=True)
class Vocab:
    """An immutable trained vocabulary: byte alphabet + merges + specials."""

    merges: tuple[tuple[str, str], ...]
    token_to_id: dict[str, int]
    specials: dict[str, int]

    def __post_init__(self):
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise TokenizerError("token ids are not a bijection onto 0..|V|-1")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def bos_id(self) -> int:
        return self.specials["[BOS]"]

    @property
    def eos_id(self) -> int:
        return self.specials["[EOS]"]

    @property
    def pad_id(self) -> int:
        return self.specials["[PAD]"]

    @property
    def delete_id(self) -> int:
        return self.specials["[DELETE]"]

    @property
    def insert_id(self) -> int:
        return self.specials["[INSERT]"]

    def is_word_id(self, token_id: int) -> bool:
        """Word tokens are bytes and merges; the five specials are not words."""
        return 0 <= token_id < self.size and token_id not in self._special_ids

    @property
    def _special_ids(self) -> frozenset[int]:
        return frozenset(self.specials.values())

    def id_to_token(self) -> list[str]:
        cached = getattr(self, "_id_to_token", None)
        if cached is None:
            cached = [""] * self.size
            for tok, i in self.token_to_id.items():
                cached[i] = tok
            object.__setattr__(self, "_id_to_token", cached)
        return cached

    def merge_table(self) -> np.ndarray:
        """Merges as an (M, 3) int64 array of (left_id, right_id, new_id)."""
        cached = getattr(self, "_merge_table", None)
        if cached is None:
            rows = []
            for n, (left, right) in enumerate(self.merges):
                rows.append(
                    (self.token_to_id[left], self.token_to_id[right], MIN_VOCAB_SIZE + n)
                )
            cached = np.array(rows, dtype=np.int64).reshape(len(rows), 3)
            object.__setattr__(self, "_merge_table", cached)
        return cached

    def to_json(self) -> str:
        doc = {
            "version": VOCAB_SCHEMA_VERSION,
            "merges": [list(m) for m in self.merges],
            "specials": dict(self.specials),
            "tokens": self.id_to_token(),
        }
        return json.dumps(doc, ensure_ascii=True, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        doc = json.loads(text)
        tokens = doc["tokens"]
        token_to_id = {tok: i for i, tok in enumerate(tokens)}
        if len(token_to_id) != len(tokens):
            raise TokenizerError("duplicate token strings in vocabulary file")
        return cls(
            merges=tuple((m[0], m[1]) for m in doc["merges"]),
            token_to_id=token_to_id,
            specials={k: int(v) for k, v in doc["specials"].items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _base_tokens() -> list[str]:
    toks = [chr(b) for b in range(N_BYTES)]
    toks.extend(SPECIAL_TOKENS)
    return toks


def train_bpe(corpus: list[str], vocab_size: int) -> Vocab:
    """Train a byte-level BPE vocabulary of exactly ``vocab_size`` entries.

    Merges are selected by highest adjacent-pair count over the whole corpus;
    ties go to the lowest (left_id, right_id) pair, so training is
    deterministic. Pair counts include overlapping occurrences; merge
    application is greedy left-to-right.
    """
    if not corpus or all(len(doc) == 0 for doc in corpus):
        raise TokenizerError("empty corpus")
    if vocab_size < MIN_VOCAB_SIZE:
        raise TokenizerError(
            f"vocab_size {vocab_size} is below the minimum {MIN_VOCAB_SIZE} "
            f"(256 bytes + {len(SPECIAL_TOKENS)} specials)"
        )

    n_merges = vocab_size - MIN_VOCAB_SIZE
    # One flat array with -1 separators between documents.
    parts: list[np.ndarray] = []
    sep = np.array([-1], dtype=np.int64)
    for doc in corpus:
        if doc:
            parts.append(np.frombuffer(doc.encode("utf-8"), dtype=np.uint8).astype(np.int64))
            parts.append(sep)
    arr = np.concatenate(parts)

    tokens = _base_tokens()
    merges: list[tuple[str, str]] = []
    next_id = MIN_VOCAB_SIZE
    for _ in range(n_merges):
        shifted = arr + 1  # separators become 0; real ids start at 1
        keys = shifted[:-1] * (next_id + 1) + shifted[1:]
        valid = (arr[:-1] >= 0) & (arr[1:] >= 0)
        counts = np.bincount(keys[valid], minlength=(next_id + 1) ** 2)
        best = int(np.argmax(counts))
        if counts[best] == 0:
            raise TokenizerError(
                f"corpus exhausted after {len(merges)} merges; "
                f"cannot reach vocab_size {vocab_size}"
            )
        left = best // (next_id + 1) - 1
        right = best % (next_id + 1) - 1
        arr = _kernels.bpe_merge_pass_numpy(arr, left, right, next_id)
        merges.append((tokens[left], tokens[right]))
        tokens.append(tokens[left] + tokens[right])
        next_id += 1

    token_to_id = {tok: i for i, tok in enumerate(tokens)}
    if len(token_to_id) != len(tokens):
        # Two different merge paths produced the same string; ids still work
        # because merges are applied by id, but the string map must be unique.
        raise TokenizerError("merge produced a duplicate token string")
    specials = {name: N_BYTES + i for i, name in enumerate(SPECIAL_TOKENS)}
    return Vocab(merges=tuple(merges), token_to_id=token_to_id, specials=specials)


def encode(vocab: Vocab, text: str) -> list[int]:
    """Encode text to word-token ids by greedy merge application in training order."""
    if not text:
        return []
    ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    table = vocab.merge_table()
    if table.size:
        ids = _kernels.bpe_encode(ids, table)
    return [int(i) for i in ids]


def encode_batch(vocab: Vocab, texts: list[str]) -> list[list[int]]:
    """Encode many texts; on the numpy backend this runs one vectorized pass."""
    table = vocab.merge_table()
    if _kernels.USE_NUMBA or not table.size or not texts:
        return [encode(vocab, t) for t in texts]
    parts = []
    sep = np.array([-1], dtype=np.int64)
    for t in texts:
        parts.append(np.frombuffer(t.encode("utf-8"), dtype=np.uint8).astype(np.int64))
        parts.append(sep)
    arr = np.concatenate(parts) if parts else sep.copy()
    for mi in range(table.shape[0]):
        arr = _kernels.bpe_merge_pass_numpy(arr, table[mi, 0], table[mi, 1], table[mi, 2])
    out: list[list[int]] = []
    cur: list[int] = []
    for v in arr.tolist():
        if v < 0:
            out.append(cur)
            cur = []
        else:
            cur.append(v)
    return out


def decode(vocab: Vocab, ids: list[int]) -> str:
    """Decode word-token ids back to text. Rejects special (non-word) ids."""
    strings = vocab.id_to_token()
    special_ids = vocab._special_ids
    chunks = []
    for i in ids:
        if i in special_ids or not (0 <= i < vocab.size):
            raise TokenizerError(f"id {i} is not a word token and cannot be decoded")
        chunks.append(strings[i])
    raw = "".join(chunks).encode("latin-1")
    return raw.decode("utf-8", errors="replace")
