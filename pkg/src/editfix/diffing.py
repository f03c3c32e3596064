"""Token-sequence diffing: ground-truth edit derivation and edit application.

Diffing recursively picks the longest matching block (no junk heuristic,
ties to the smallest indices) and converts the resulting opcodes into an
edit program whose locations index the original buggy sequence. A replace
opcode becomes a delete of the range followed by an insert anchored at the
range END, e.g. replace of [1,2) serializes as DEL 1 2 / INS 2.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grammar import Delete, EditProgram, Insert, ProgramError, serialize


class DiffError(ValueError):
    """Bad input to the diff engine."""


class ApplyError(ValueError):
    """An edit program does not fit the sequence it is applied to."""


@dataclass(frozen=True)
class Opcode:
    tag: str  # equal | delete | insert | replace
    i1: int
    i2: int
    j1: int
    j2: int


def longest_matching_block(
    x: list[int],
    y: list[int],
    ilo: int = 0,
    ihi: int | None = None,
    jlo: int = 0,
    jhi: int | None = None,
) -> tuple[int, int, int]:
    """Longest (i, j, k) with x[i:i+k] == y[j:j+k] inside the given ranges.

    Every token is significant (no junk or popularity heuristic). Ties break
    to the smallest i, then the smallest j. Returns k == 0 when the ranges
    share no token.
    """
    xa = np.asarray(x, dtype=np.int64)
    ya = np.asarray(y, dtype=np.int64)
    ihi = len(xa) if ihi is None else ihi
    jhi = len(ya) if jhi is None else jhi
    if not (0 <= ilo <= ihi <= len(xa)) or not (0 <= jlo <= jhi <= len(ya)):
        raise DiffError(f"ranges ({ilo},{ihi})/({jlo},{jhi}) out of bounds")
    i, j, k = _kernels.longest_match(xa, ya, ilo, ihi, jlo, jhi)
    return int(i), int(j), int(k)


def matching_blocks(x: list[int], y: list[int]) -> list[tuple[int, int, int]]:
    """All matching blocks in order, adjacent blocks merged, plus a terminal
    zero-length sentinel at (len(x), len(y))."""
    xa = np.asarray(x, dtype=np.int64)
    ya = np.asarray(y, dtype=np.int64)
    found: list[tuple[int, int, int]] = []
    # Explicit stack; segments are emitted left to right.
    stack = [(0, len(xa), 0, len(ya))]
    collected: list[tuple[int, int, int]] = []
    while stack:
        ilo, ihi, jlo, jhi = stack.pop()
        i, j, k = _kernels.longest_match(xa, ya, ilo, ihi, jlo, jhi)
        if k:
            collected.append((int(i), int(j), int(k)))
            stack.append((i + k, ihi, j + k, jhi))
            stack.append((ilo, i, jlo, j))
    collected.sort()
    for block in collected:
        if found and found[-1][0] + found[-1][2] == block[0] and found[-1][1] + found[-1][2] == block[1]:
            prev = found.pop()
            found.append((prev[0], prev[1], prev[2] + block[2]))
        else:
            found.append(block)
    found.append((len(xa), len(ya), 0))
    return found


def opcodes(x: list[int], y: list[int]) -> list[Opcode]:
    """Tile both sequences with equal/delete/insert/replace opcodes."""
    out: list[Opcode] = []
    ia = ja = 0
    for i, j, k in matching_blocks(x, y):
        if ia < i and ja < j:
            out.append(Opcode("replace", ia, i, ja, j))
        elif ia < i:
            out.append(Opcode("delete", ia, i, ja, j))
        elif ja < j:
            out.append(Opcode("insert", ia, i, ja, j))
        if k:
            out.append(Opcode("equal", i, i + k, j, j + k))
        ia, ja = i + k, j + k
    return out


def derive_edits(x: list[int], y: list[int], max_len: int = 512) -> EditProgram:
    """Derive the canonical edit program transforming ``x`` into ``y``."""
    if len(x) > max_len:
        raise DiffError(f"buggy sequence length {len(x)} exceeds {max_len}")
    actions: list[Delete | Insert] = []
    for op in opcodes(x, y):
        if op.tag == "delete":
            actions.append(Delete(op.i1, op.i2))
        elif op.tag == "insert":
            actions.append(Insert(op.i1, tuple(y[op.j1 : op.j2])))
        elif op.tag == "replace":
            actions.append(Delete(op.i1, op.i2))
            actions.append(Insert(op.i2, tuple(y[op.j1 : op.j2])))
    program = EditProgram(tuple(actions))
    program.validate(len(x))
    return program


def _check_applicable(x_len: int, program: EditProgram) -> None:
    for action in program.actions:
        if isinstance(action, Delete):
            if action.end > x_len or action.start < 0:
                raise ApplyError(
                    f"delete [{action.start},{action.end}) out of range for length {x_len}"
                )
        elif action.at > x_len or action.at < 0:
            raise ApplyError(f"insert at {action.at} out of range for length {x_len}")


def _apply_order(program: EditProgram) -> list[Delete | Insert]:
    # Inserts sort before a delete starting at the same location; processing
    # descending (reversed) therefore applies the delete first, and processing
    # ascending applies the insert first. Both give x[:j] + words + x[k:].
    return sorted(program.actions, key=lambda a: (a.primary, 0 if isinstance(a, Insert) else 1))


def _validate_for_apply(x_len: int, program: EditProgram) -> None:
    # Actions in original coordinates are order-independent, so applying a
    # permuted but otherwise valid program is allowed; canonicalize to check.
    canonical = sorted(program.actions, key=lambda a: (a.primary, 0 if isinstance(a, Delete) else 1))
    EditProgram(tuple(canonical)).validate()
    _check_applicable(x_len, program)


def apply_edits(x: list[int], program: EditProgram) -> list[int]:
    """Apply ``program`` to ``x`` by splicing in descending coordinate order."""
    _validate_for_apply(len(x), program)
    seq = list(x)
    for action in reversed(_apply_order(program)):
        if isinstance(action, Delete):
            del seq[action.start : action.end]
        else:
            seq[action.at : action.at] = list(action.words)
    return seq


def apply_edits_ascending(x: list[int], program: EditProgram) -> list[int]:
    """Reference implementation with explicit offset bookkeeping, ascending order."""
    ordered = _apply_order(program)
    _validate_for_apply(len(x), program)
    seq = list(x)
    offset = 0
    for action in ordered:
        if isinstance(action, Delete):
            del seq[action.start + offset : action.end + offset]
            offset -= action.end - action.start
        else:
            at = action.at + offset
            seq[at:at] = list(action.words)
            offset += len(action.words)
    return seq


@dataclass(frozen=True)
class EditStats:
    """Per-corpus statistics of derived edit programs.

    Medians are lower order statistics of the underlying integer multisets;
    means are exact integer ratios, rounded only when displayed.
    """

    n_pairs: int
    edits_mean: float
    edits_median: int
    insertion_mean: float
    insertion_median: int
    seq_len_mean: float
    seq_len_median: int

    def as_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "edits": {"mean": self.edits_mean, "median": self.edits_median},
            "insertion_length": {"mean": self.insertion_mean, "median": self.insertion_median},
            "sequence_length": {"mean": self.seq_len_mean, "median": self.seq_len_median},
        }


def per_pair_counts(x: list[int], y: list[int], max_len: int = 512) -> tuple[int, int, int]:
    """(number of edits, total inserted words, serialized length) for one pair."""
    program = derive_edits(x, y, max_len=max_len)
    n_edits = len(program.actions)
    ins_len = sum(len(a.words) for a in program.actions if isinstance(a, Insert))
    seq_len = len(serialize(program))
    return n_edits, ins_len, seq_len


def edit_stats(pairs: list[tuple[list[int], list[int]]], max_len: int = 512) -> EditStats:
    """Aggregate edit statistics over tokenized (buggy, fixed) pairs."""
    if not pairs:
        raise DiffError("empty corpus")
    edits, inss, lens = [], [], []
    for x, y in pairs:
        a, b, c = per_pair_counts(x, y, max_len=max_len)
        edits.append(a)
        inss.append(b)
        lens.append(c)
    n = len(pairs)
    return EditStats(
        n_pairs=n,
        edits_mean=sum(edits) / n,
        edits_median=statistics.median_low(edits),
        insertion_mean=sum(inss) / n,
        insertion_median=statistics.median_low(inss),
        seq_len_mean=sum(lens) / n,
        seq_len_median=statistics.median_low(lens),
    )
