"""Shared test utilities: oracle implementations kept independent of the
library code paths they check."""

import re

import numpy as np

from editfix.bpe import Vocab
from editfix.grammar import Delete, EditProgram, EditToken, Insert, TokenKind
from editfix.tensor import backward


def gradcheck(make_loss, params, h=1e-5, sample=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    The denominator is max(1, |analytic|, |numeric|), so tiny gradients are
    compared absolutely. With ``sample`` set, only that many coordinates per
    parameter are probed (seeded by ``rng``).
    """
    for p in params:
        p.grad = None
    loss = make_loss()
    backward(loss)
    worst = 0.0
    for p in params:
        grad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        if sample is not None and flat.size > sample:
            idxs = rng.choice(flat.size, size=sample, replace=False)
        else:
            idxs = range(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = make_loss().item()
            flat[i] = orig - h
            lm = make_loss().item()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(numeric - gflat[i]) / max(1.0, abs(numeric), abs(gflat[i]))
            worst = max(worst, err)
        p.grad = None
    return worst


def tiny_word_vocab(n_words=3) -> Vocab:
    """A hand-built vocabulary of n plain word tokens plus the five specials.

    Bypasses BPE training; used by model/beam tests that work on raw ids.
    """
    letters = "abcdefghijklmnop"
    token_to_id = {letters[i]: i for i in range(n_words)}
    specials = {}
    for j, name in enumerate(("[BOS]", "[EOS]", "[PAD]", "[DELETE]", "[INSERT]")):
        token_to_id[name] = n_words + j
        specials[name] = n_words + j
    return Vocab(merges=(), token_to_id=token_to_id, specials=specials)


def random_program(rng, seq_len, word_ids, max_actions=3) -> EditProgram:
    """A random canonical edit program for a sequence of ``seq_len`` tokens."""
    actions = []
    cursor = 0
    for _ in range(int(rng.integers(0, max_actions + 1))):
        if cursor > seq_len:
            break
        kind = rng.integers(0, 2)
        if kind == 0 and cursor < seq_len:  # delete
            start = int(rng.integers(cursor, seq_len))
            end = int(rng.integers(start + 1, seq_len + 1))
            actions.append(Delete(start, end))
            cursor = end
        else:  # insert
            at = int(rng.integers(cursor, seq_len + 1))
            n_words = int(rng.integers(1, 4))
            words = tuple(int(word_ids[int(i)]) for i in rng.integers(0, len(word_ids), n_words))
            actions.append(Insert(at, words))
            cursor = at + 1
    program = EditProgram(tuple(sorted(
        actions, key=lambda a: (a.primary, 0 if isinstance(a, Delete) else 1)
    )))
    program.validate(seq_len)
    return program


# Independent FSM-language oracle: the edit language at the token-KIND level
# is exactly  BOS (DELETE LOC LOC | INSERT LOC WORD*)* EOS.
_KIND_CHAR = {
    TokenKind.BOS: "B",
    TokenKind.EOS: "E",
    TokenKind.DELETE: "D",
    TokenKind.INSERT: "I",
    TokenKind.WORD: "W",
    TokenKind.LOC: "L",
}
_LANGUAGE = re.compile(r"B(?:DLL|ILW*)*E")


def fsm_oracle_accepts(tokens) -> bool:
    return _LANGUAGE.fullmatch("".join(_KIND_CHAR[t.kind] for t in tokens)) is not None


def enumerate_complete_sequences(L, max_len, n_words=3):
    """Every legal complete editing sequence (BOS..EOS) of length <= max_len
    for an input of L tokens, under the same semantic rules the decoder uses
    (delete ranges increase, inserts are non-empty, locations within 0..L)."""
    out = []

    def rec(tokens, state, words_since, del_from):
        n = len(tokens)
        if n >= max_len:
            return
        if state in ("ACTION", "WORD") and (state == "ACTION" or words_since >= 1):
            out.append(tokens + [EditToken.eos()])
        rem = max_len - n - 1
        if state in ("ACTION", "WORD"):
            exits = state == "ACTION" or words_since >= 1
            if exits and rem >= 3 and L >= 1:
                rec(tokens + [EditToken.delete()], "DEL_FROM", words_since, del_from)
            if exits and rem >= 3:
                rec(tokens + [EditToken.insert()], "INS_AT", words_since, del_from)
            if state == "WORD" and rem >= 1:
                for w in range(n_words):
                    rec(tokens + [EditToken.word(w)], "WORD", words_since + 1, del_from)
        elif state == "DEL_FROM":
            if rem >= 2:
                for l in range(L):
                    rec(tokens + [EditToken.loc(l)], "DEL_TO", words_since, l)
        elif state == "DEL_TO":
            if rem >= 1:
                for l in range(del_from + 1, L + 1):
                    rec(tokens + [EditToken.loc(l)], "ACTION", words_since, del_from)
        elif state == "INS_AT":
            if rem >= 2:
                for l in range(L + 1):
                    rec(tokens + [EditToken.loc(l)], "WORD", 0, del_from)

    rec([EditToken.bos()], "ACTION", 0, 0)
    return out
