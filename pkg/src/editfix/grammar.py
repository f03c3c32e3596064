"""The edit language: tokens, finite state machine, and program serialization.

An edit program is an ordered list of delete/insert actions whose location
indices all refer to the ORIGINAL buggy token sequence. Programs serialize to
flat edit-token sequences accepted by a small FSM; the FSM also supplies the
per-state legal token kinds used to mask decoder outputs.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from .bpe import Vocab, decode as bpe_decode, encode as bpe_encode

LOC_BUDGET = 512  # locations 0..512 inclusive -> 513 location symbols


class GrammarError(ValueError):
    """A token sequence violates the edit grammar."""


class ProgramError(ValueError):
    """A structured edit program violates its invariants."""


class TokenKind(enum.Enum):
    BOS = "BOS"
    EOS = "EOS"
    DELETE = "DELETE"
    INSERT = "INSERT"
    WORD = "WORD"
    LOC = "LOC"


class FsmState(enum.Enum):
    BOS = "BOS"
    ACTION = "ACTION"
    INS_AT = "INS_AT"
    DEL_FROM = "DEL_FROM"
    DEL_TO = "DEL_TO"
    WORD = "WORD"
    EOS = "EOS"


@dataclass(frozen=True)
class EditToken:
    """One symbol of an editing sequence: action, word, or location."""

    kind: TokenKind
    value: int = 0  # word id for WORD, location index for LOC, else 0

    def __post_init__(self):
        if self.kind is TokenKind.LOC and not 0 <= self.value <= LOC_BUDGET:
            raise GrammarError(f"location {self.value} outside 0..{LOC_BUDGET}")

    @staticmethod
    def bos() -> "EditToken":
        return EditToken(TokenKind.BOS)

    @staticmethod
    def eos() -> "EditToken":
        return EditToken(TokenKind.EOS)

    @staticmethod
    def delete() -> "EditToken":
        return EditToken(TokenKind.DELETE)

    @staticmethod
    def insert() -> "EditToken":
        return EditToken(TokenKind.INSERT)

    @staticmethod
    def word(word_id: int) -> "EditToken":
        return EditToken(TokenKind.WORD, word_id)

    @staticmethod
    def loc(index: int) -> "EditToken":
        return EditToken(TokenKind.LOC, index)


@dataclass(frozen=True)
class Delete:
    start: int
    end: int  # half-open range [start, end) over the original sequence

    @property
    def primary(self) -> int:
        return self.start


@dataclass(frozen=True)
class Insert:
    at: int
    words: tuple[int, ...]

    @property
    def primary(self) -> int:
        return self.at


EditAction = Delete | Insert


def _action_sort_key(a: EditAction) -> tuple[int, int]:
    # Deletes sort before inserts at the same primary location.
    return (a.primary, 0 if isinstance(a, Delete) else 1)


@dataclass(frozen=True)
class EditProgram:
    """Ordered delete/insert actions in original-sequence coordinates."""

    actions: tuple[EditAction, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.actions)

    def validate(self, seq_len: int | None = None) -> None:
        """Raise ProgramError unless this program is canonical.

        Canonical means: actions sorted by (location, delete-first), deleted
        ranges pairwise disjoint, at most one insert per location, no insert
        strictly inside a deleted range, no empty insertion. When ``seq_len``
        is given, all indices must also fall within 0..seq_len.
        """
        keys = [_action_sort_key(a) for a in self.actions]
        if keys != sorted(keys):
            raise ProgramError("actions are not sorted by location")
        deletes = [a for a in self.actions if isinstance(a, Delete)]
        inserts = [a for a in self.actions if isinstance(a, Insert)]
        for d in deletes:
            if not 0 <= d.start < d.end:
                raise ProgramError(f"delete range [{d.start}, {d.end}) is empty or negative")
            if seq_len is not None and d.end > seq_len:
                raise ProgramError(f"delete end {d.end} exceeds sequence length {seq_len}")
        for a, b in zip(deletes, deletes[1:]):
            if b.start < a.end:
                raise ProgramError(f"deleted ranges [{a.start},{a.end}) and [{b.start},{b.end}) overlap")
        seen_at: set[int] = set()
        for ins in inserts:
            if ins.at < 0:
                raise ProgramError(f"insert location {ins.at} is negative")
            if seq_len is not None and ins.at > seq_len:
                raise ProgramError(f"insert location {ins.at} exceeds sequence length {seq_len}")
            if ins.at in seen_at:
                raise ProgramError(f"two inserts at location {ins.at}")
            seen_at.add(ins.at)
            if not ins.words:
                raise ProgramError(f"empty insertion at location {ins.at}")
            for d in deletes:
                if d.start < ins.at < d.end:
                    raise ProgramError(
                        f"insert at {ins.at} lies inside deleted range [{d.start},{d.end})"
                    )


# FSM transition table: (state, token kind) -> next state.
_TRANSITIONS: dict[tuple[FsmState, TokenKind], FsmState] = {
    (FsmState.BOS, TokenKind.BOS): FsmState.ACTION,
    (FsmState.ACTION, TokenKind.EOS): FsmState.EOS,
    (FsmState.ACTION, TokenKind.INSERT): FsmState.INS_AT,
    (FsmState.ACTION, TokenKind.DELETE): FsmState.DEL_FROM,
    (FsmState.DEL_FROM, TokenKind.LOC): FsmState.DEL_TO,
    (FsmState.DEL_TO, TokenKind.LOC): FsmState.ACTION,
    (FsmState.INS_AT, TokenKind.LOC): FsmState.WORD,
    (FsmState.WORD, TokenKind.WORD): FsmState.WORD,
    (FsmState.WORD, TokenKind.DELETE): FsmState.DEL_FROM,
    (FsmState.WORD, TokenKind.INSERT): FsmState.INS_AT,
    (FsmState.WORD, TokenKind.EOS): FsmState.EOS,
}

_VALID_KINDS: dict[FsmState, frozenset[TokenKind]] = {
    FsmState.BOS: frozenset({TokenKind.BOS}),
    FsmState.ACTION: frozenset({TokenKind.DELETE, TokenKind.INSERT, TokenKind.EOS}),
    FsmState.DEL_FROM: frozenset({TokenKind.LOC}),
    FsmState.DEL_TO: frozenset({TokenKind.LOC}),
    FsmState.INS_AT: frozenset({TokenKind.LOC}),
    FsmState.WORD: frozenset({TokenKind.WORD, TokenKind.DELETE, TokenKind.INSERT, TokenKind.EOS}),
}


def fsm_next(state: FsmState, token: EditToken) -> FsmState:
    """Advance the FSM, raising GrammarError for transitions that do not exist."""
    nxt = _TRANSITIONS.get((state, token.kind))
    if nxt is None:
        raise GrammarError(f"no transition from state {state.name} on token kind {token.kind.name}")
    return nxt


def valid_token_kinds(state: FsmState) -> frozenset[TokenKind]:
    """The token kinds with an outgoing transition from ``state``."""
    if state is FsmState.EOS:
        raise GrammarError("EOS is terminal; no tokens are valid")
    return _VALID_KINDS[state]


def serialize(program: EditProgram) -> list[EditToken]:
    """Flatten a canonical program into an FSM-accepted edit-token sequence."""
    try:
        program.validate()
    except ProgramError as e:
        raise ProgramError(f"cannot serialize invalid program: {e}") from e
    out = [EditToken.bos()]
    for action in program.actions:
        if isinstance(action, Delete):
            out.append(EditToken.delete())
            out.append(EditToken.loc(action.start))
            out.append(EditToken.loc(action.end))
        else:
            out.append(EditToken.insert())
            out.append(EditToken.loc(action.at))
            out.extend(EditToken.word(w) for w in action.words)
    out.append(EditToken.eos())
    return out


def parse(tokens: list[EditToken]) -> EditProgram:
    """Run the FSM over ``tokens`` and rebuild the structured program.

    Rejects any FSM violation (with the offending position), a delete whose
    range is not strictly increasing, and an insert with no words. Location
    indices are validated against the target sequence at apply time, not here,
    and the returned action list preserves emission order.
    """
    state = FsmState.BOS
    actions: list[EditAction] = []
    pending_del_from: int | None = None
    pending_ins_at: int | None = None
    pending_words: list[int] = []

    def flush_insert(pos: int) -> None:
        nonlocal pending_ins_at
        if pending_ins_at is not None:
            if not pending_words:
                raise GrammarError(f"empty insertion ending at token position {pos}")
            actions.append(Insert(pending_ins_at, tuple(pending_words)))
            pending_ins_at = None
            pending_words.clear()

    for pos, tok in enumerate(tokens):
        try:
            nxt = fsm_next(state, tok)
        except GrammarError as e:
            raise GrammarError(f"at token position {pos}: {e}") from e
        if state is FsmState.WORD and tok.kind is not TokenKind.WORD:
            flush_insert(pos)
        if tok.kind is TokenKind.WORD:
            pending_words.append(tok.value)
        elif tok.kind is TokenKind.LOC:
            if state is FsmState.DEL_FROM:
                pending_del_from = tok.value
            elif state is FsmState.DEL_TO:
                assert pending_del_from is not None
                if tok.value <= pending_del_from:
                    raise GrammarError(
                        f"at token position {pos}: delete range "
                        f"[{pending_del_from}, {tok.value}) is not increasing"
                    )
                actions.append(Delete(pending_del_from, tok.value))
                pending_del_from = None
            elif state is FsmState.INS_AT:
                pending_ins_at = tok.value
        state = nxt
    if state is not FsmState.EOS:
        raise GrammarError(f"sequence ended in state {state.name}, not EOS")
    return EditProgram(tuple(actions))


def accepts(tokens: list[EditToken]) -> bool:
    """FSM-level membership only (semantic checks like range order excluded)."""
    state = FsmState.BOS
    for tok in tokens:
        nxt = _TRANSITIONS.get((state, tok.kind))
        if nxt is None:
            return False
        state = nxt
    return state is FsmState.EOS


# --- id-space serialization -------------------------------------------------
#
# Word/action tokens map to their vocabulary ids; location l maps to
# vocab.size + l. This is the storage form used in JSONL training data.


def token_to_id(tok: EditToken, vocab: Vocab) -> int:
    if tok.kind is TokenKind.BOS:
        return vocab.bos_id
    if tok.kind is TokenKind.EOS:
        return vocab.eos_id
    if tok.kind is TokenKind.DELETE:
        return vocab.delete_id
    if tok.kind is TokenKind.INSERT:
        return vocab.insert_id
    if tok.kind is TokenKind.WORD:
        if not vocab.is_word_id(tok.value):
            raise GrammarError(f"word token id {tok.value} is not a word in this vocabulary")
        return tok.value
    return vocab.size + tok.value


def id_to_token(token_id: int, vocab: Vocab) -> EditToken:
    if token_id >= vocab.size:
        loc = token_id - vocab.size
        if loc > LOC_BUDGET:
            raise GrammarError(f"id {token_id} is beyond the location budget")
        return EditToken.loc(loc)
    if token_id == vocab.bos_id:
        return EditToken.bos()
    if token_id == vocab.eos_id:
        return EditToken.eos()
    if token_id == vocab.delete_id:
        return EditToken.delete()
    if token_id == vocab.insert_id:
        return EditToken.insert()
    if token_id == vocab.pad_id:
        raise GrammarError("[PAD] is not an edit token")
    if token_id < 0:
        raise GrammarError(f"negative token id {token_id}")
    return EditToken.word(token_id)


def tokens_to_ids(tokens: list[EditToken], vocab: Vocab) -> list[int]:
    return [token_to_id(t, vocab) for t in tokens]


def ids_to_tokens(ids: list[int], vocab: Vocab) -> list[EditToken]:
    return [id_to_token(i, vocab) for i in ids]


# --- human-readable text form -----------------------------------------------


def program_to_text(program: EditProgram, vocab: Vocab) -> str:
    """One-line text form: ``DEL i j | INS i "<escaped words>" | ...``"""
    parts = []
    for action in program.actions:
        if isinstance(action, Delete):
            parts.append(f"DEL {action.start} {action.end}")
        else:
            parts.append(f"INS {action.at} {json.dumps(bpe_decode(vocab, list(action.words)))}")
    return " | ".join(parts)


def program_from_text(line: str, vocab: Vocab) -> EditProgram:
    """Parse the text form back. Inserted words are re-encoded with ``vocab``,
    so ids round-trip only when the fragment tokenizes the same standalone."""
    actions: list[EditAction] = []
    line = line.strip()
    if not line:
        return EditProgram(())
    for part in line.split(" | "):
        fields = part.split(" ", 2)
        if fields[0] == "DEL" and len(fields) == 3:
            actions.append(Delete(int(fields[1]), int(fields[2])))
        elif fields[0] == "INS" and len(fields) == 3:
            words = bpe_encode(vocab, json.loads(fields[2]))
            actions.append(Insert(int(fields[1]), tuple(words)))
        else:
            raise ProgramError(f"unparseable action {part!r}")
    return EditProgram(tuple(actions))
