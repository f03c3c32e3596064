"""Grammar-constrained beam search over edit-token sequences.

Each step expands every live beam with its legal tokens only: the FSM fixes
the legal token KINDS per state, and three semantic masks keep every emitted
hypothesis parseable — a delete's second location must exceed its first, an
insert must carry at least one word, and a token is dropped when the grammar
could no longer reach EOS within the length budget (this generalizes forced
EOS termination at max_len). Probabilities of illegal tokens are zero; legal
tokens keep their raw softmax probability (no renormalization), so re-scoring
a finished hypothesis through the model reproduces its stored log-prob.

The candidate pool at each step is the cross product of live beams and their
legal tokens plus the frozen finished beams; the K best length-penalized
scores survive, ties broken lexicographically by token ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bpe import Vocab
from .diffing import ApplyError, apply_edits
from .grammar import (
    EditToken,
    FsmState,
    GrammarError,
    ProgramError,
    TokenKind,
    parse,
    token_to_id,
)
from .model import InputError, RepairModel
from .tensor import Tensor, no_grad


class DecodeError(RuntimeError):
    """No beam had any legal continuation before reaching EOS."""


class PredictionError(ValueError):
    """A predicted hypothesis cannot be turned into fixed code."""


@dataclass(frozen=True)
class Hypothesis:
    """A finished candidate editing sequence with its running scores."""

    tokens: tuple[EditToken, ...]
    token_logprobs: tuple[float, ...]
    log_prob: float
    lp_score: float
    fsm_state: FsmState
    finished: bool


def length_penalty(n_tokens: int, alpha: float) -> float:
    return ((5.0 + n_tokens) / 6.0) ** alpha


# Fewest tokens (including the closing EOS) needed to reach EOS from a state.
def _min_completion(state: FsmState, words_since_insert: int) -> int:
    if state is FsmState.EOS:
        return 0
    if state is FsmState.ACTION:
        return 1
    if state is FsmState.WORD:
        return 1 if words_since_insert >= 1 else 2
    if state is FsmState.DEL_TO:
        return 2
    if state is FsmState.INS_AT:
        return 3
    if state is FsmState.DEL_FROM:
        return 3
    raise GrammarError(f"unreachable state {state}")


class _Beam:
    __slots__ = ("tokens", "logps", "log_prob", "lp", "state", "words_since",
                 "del_from", "finished", "tie")

    def __init__(self, tokens, logps, log_prob, lp, state, words_since, del_from, finished, tie):
        self.tokens = tokens
        self.logps = logps
        self.log_prob = log_prob
        self.lp = lp
        self.state = state
        self.words_since = words_since
        self.del_from = del_from
        self.finished = finished
        self.tie = tie


def _initial_beam(alpha: float) -> _Beam:
    return _Beam(
        tokens=[EditToken.bos()], logps=[0.0], log_prob=0.0,
        lp=0.0 / length_penalty(1, alpha), state=FsmState.ACTION,
        words_since=0, del_from=0, finished=False, tie=(0,),
    )


def beam_search_batch(
    model: RepairModel,
    xs: list[list[int]],
    K: int,
    max_len: int = 64,
    alpha: float = 0.6,
    batch_size: int = 64,
    traces: list | None = None,
) -> list[list[Hypothesis]]:
    """Beam-search every input; returns per input up to K finished hypotheses,
    best first by length-penalized score."""
    if K < 1:
        raise InputError(f"beam width {K} must be >= 1")
    if max_len < 2:
        raise InputError(f"max_len {max_len} must be >= 2 ([BOS][EOS])")
    out: list[list[Hypothesis]] = []
    for lo in range(0, len(xs), batch_size):
        chunk = xs[lo : lo + batch_size]
        chunk_traces = None
        if traces is not None:
            chunk_traces = [[] for _ in chunk]
        out.extend(_beam_chunk(model, chunk, K, max_len, alpha, chunk_traces))
        if traces is not None:
            traces.extend(chunk_traces)
    return out


def beam_search(
    model: RepairModel,
    x_ids: list[int],
    K: int,
    max_len: int = 64,
    alpha: float = 0.6,
    trace: list | None = None,
) -> list[Hypothesis]:
    """Single-input convenience wrapper around ``beam_search_batch``."""
    traces = [] if trace is not None else None
    result = beam_search_batch(model, [x_ids], K, max_len, alpha, traces=traces)
    if trace is not None:
        trace.extend(traces[0])
    return result[0]


def _beam_chunk(model, xs, K, max_len, alpha, traces):
    vocab = model.vocab
    cfg = model.config
    for x in xs:
        if len(x) > cfg.max_len:
            raise InputError(f"input length {len(x)} exceeds max_len {cfg.max_len}")
        if max(x, default=0) >= vocab.size or min(x, default=0) < 0:
            raise InputError("input ids outside the vocabulary")

    with no_grad():
        B = len(xs)
        enc_ids = np.full((B, max(len(x) for x in xs) + 1), vocab.pad_id, dtype=np.int64)
        enc_len = np.zeros(B, dtype=np.int64)
        for b, x in enumerate(xs):
            enc_ids[b, : len(x)] = x
            enc_ids[b, len(x)] = vocab.eos_id
            enc_len[b] = len(x) + 1
        memory_np = model.encoder_forward(enc_ids, enc_len).data

        word_id_arr = np.array(
            [i for i in range(vocab.size) if vocab.is_word_id(i)], dtype=np.int64
        )
        beams: list[list[_Beam]] = [[_initial_beam(alpha)] for _ in xs]
        done = [False] * B
        cur_len = 1
        while cur_len < max_len:
            live: list[tuple[int, _Beam]] = []
            for b in range(B):
                if not done[b]:
                    live.extend((b, beam) for beam in beams[b] if not beam.finished)
            if not live:
                break
            wa_lp, loc_lp = _forward_live(model, vocab, memory_np, enc_len, live, word_id_arr)
            live_by_inst: dict[int, list[tuple[int, _Beam]]] = {}
            for row, (inst, beam) in enumerate(live):
                live_by_inst.setdefault(inst, []).append((row, beam))
            rem = max_len - cur_len - 1
            for b in range(B):
                if done[b]:
                    continue
                pool: list[tuple[float, tuple, object]] = []
                for beam in beams[b]:
                    if beam.finished:
                        pool.append((beam.lp, beam.tie, beam))
                for row, beam in live_by_inst.get(b, ()):
                    for logp_tok, tok, tok_id in _candidates(
                        vocab, beam, len(xs[b]), rem, K,
                        wa_lp.get(row), loc_lp.get(row), word_id_arr,
                    ):
                        lp = (beam.log_prob + logp_tok) / length_penalty(cur_len + 1, alpha)
                        pool.append((lp, beam.tie + (tok_id,), (beam, tok, logp_tok, lp)))
                if not pool:
                    done[b] = True
                    beams[b] = []
                    continue
                pool.sort(key=lambda e: (-e[0], e[1]))
                survivors = pool[:K]
                if traces is not None:
                    traces[b].append({
                        "survivor_lp": [e[0] for e in survivors],
                        "discarded_lp": [e[0] for e in pool[K:]],
                    })
                new_beams = []
                for lp_val, tie, payload in survivors:
                    if isinstance(payload, _Beam):
                        new_beams.append(payload)
                    else:
                        new_beams.append(_extend(payload[0], payload[1], payload[2], payload[3], tie))
                beams[b] = new_beams
                if all(beam.finished for beam in new_beams):
                    done[b] = True
            cur_len += 1

    results = []
    for b in range(B):
        finished = [beam for beam in beams[b] if beam.finished]
        finished.sort(key=lambda beam: (-beam.lp, beam.tie))
        seen = set()
        hyps = []
        for beam in finished:
            if beam.tie in seen:
                continue
            seen.add(beam.tie)
            hyps.append(Hypothesis(
                tokens=tuple(beam.tokens),
                token_logprobs=tuple(beam.logps),
                log_prob=beam.log_prob,
                lp_score=beam.lp,
                fsm_state=FsmState.EOS,
                finished=True,
            ))
        results.append(hyps[:K])
    return results


def _forward_live(model, vocab, memory_np, enc_len, live, word_id_arr):
    """One decoder pass over all live beams; returns per-row log-prob maps."""
    N = len(live)
    Tn = len(live[0][1].tokens)
    dtype = model.dtype
    inst_idx = np.array([b for b, _ in live], dtype=np.int64)
    word_ids = np.zeros((N, Tn), dtype=np.int64)
    loc_ids = np.zeros((N, Tn), dtype=np.int64)
    is_word = np.zeros((N, Tn, 1), dtype=dtype)
    for r, (_, beam) in enumerate(live):
        for t, tok in enumerate(beam.tokens):
            if tok.kind is TokenKind.LOC:
                loc_ids[r, t] = tok.value
            else:
                word_ids[r, t] = model._token_embedding_id(tok)
                is_word[r, t, 0] = 1.0
    mem_live = Tensor(memory_np[inst_idx])
    mem_len_live = enc_len[inst_idx]
    in_emb = model._mixed_embedding(mem_live, word_ids, loc_ids, is_word)
    penult, hidden = model.decoder_forward(
        mem_live, mem_len_live, in_emb, np.full(N, Tn, dtype=np.int64)
    )
    penult_last = penult.data[:, -1, :]
    hidden_last = hidden.data[:, -1, :]

    wa_rows = [r for r, (_, beam) in enumerate(live)
               if beam.state in (FsmState.ACTION, FsmState.WORD)]
    loc_rows = [r for r in range(N) if r not in set(wa_rows)]
    wa_lp: dict[int, np.ndarray] = {}
    loc_lp: dict[int, np.ndarray] = {}
    if wa_rows:
        h = Tensor(hidden_last[wa_rows])
        logits = model.wa_logits(h).data.astype(np.float64)
        lse = _logsumexp_rows(logits)
        for i, r in enumerate(wa_rows):
            wa_lp[r] = logits[i] - lse[i]
    if loc_rows:
        v = model.pointer_latent(Tensor(penult_last[loc_rows])).data
        for i, r in enumerate(loc_rows):
            b = live[r][0]
            L_plus_1 = int(enc_len[b])
            scores = (memory_np[b, :L_plus_1, :] @ v[i]).astype(np.float64)
            loc_lp[r] = scores - _logsumexp_rows(scores[None, :])[0]
    return wa_lp, loc_lp


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def _candidates(vocab, beam, L, rem, K, wa_lp, loc_lp, word_id_arr):
    """Legal (log-prob, token, tie-break id) extensions of one live beam."""
    state = beam.state
    if state in (FsmState.ACTION, FsmState.WORD):
        exits_ok = state is FsmState.ACTION or beam.words_since >= 1
        if exits_ok:
            yield wa_lp[vocab.eos_id], EditToken.eos(), vocab.eos_id
            if rem >= 3 and L >= 1:
                yield wa_lp[vocab.delete_id], EditToken.delete(), vocab.delete_id
            if rem >= 3:
                yield wa_lp[vocab.insert_id], EditToken.insert(), vocab.insert_id
        if state is FsmState.WORD and rem >= 1:
            word_lps = wa_lp[word_id_arr]
            k = min(K, word_lps.shape[0])
            top = np.argpartition(-word_lps, k - 1)[:k] if k < word_lps.shape[0] else np.arange(k)
            for j in sorted(top.tolist()):
                wid = int(word_id_arr[j])
                yield float(word_lps[j]), EditToken.word(wid), wid
    elif state is FsmState.DEL_FROM:
        if rem >= 2:
            yield from _loc_candidates(vocab, loc_lp, 0, L - 1, K)
    elif state is FsmState.DEL_TO:
        if rem >= 1:
            yield from _loc_candidates(vocab, loc_lp, beam.del_from + 1, L, K)
    elif state is FsmState.INS_AT:
        if rem >= 2:
            yield from _loc_candidates(vocab, loc_lp, 0, L, K)


def _loc_candidates(vocab, loc_lp, lo, hi, K):
    if hi < lo:
        return
    window = loc_lp[lo : hi + 1]
    k = min(K, window.shape[0])
    top = np.argpartition(-window, k - 1)[:k] if k < window.shape[0] else np.arange(k)
    for j in sorted(top.tolist()):
        loc = lo + int(j)
        yield float(window[j]), EditToken.loc(loc), vocab.size + loc


def _extend(beam: _Beam, tok: EditToken, logp: float, lp: float, tie: tuple) -> _Beam:
    state = beam.state
    words_since = beam.words_since
    del_from = beam.del_from
    finished = False
    if tok.kind is TokenKind.EOS:
        nxt = FsmState.EOS
        finished = True
    elif tok.kind is TokenKind.DELETE:
        nxt = FsmState.DEL_FROM
    elif tok.kind is TokenKind.INSERT:
        nxt = FsmState.INS_AT
    elif tok.kind is TokenKind.WORD:
        nxt = FsmState.WORD
        words_since += 1
    else:  # LOC
        if state is FsmState.DEL_FROM:
            nxt = FsmState.DEL_TO
            del_from = tok.value
        elif state is FsmState.DEL_TO:
            nxt = FsmState.ACTION
        else:
            nxt = FsmState.WORD
            words_since = 0
    return _Beam(
        tokens=beam.tokens + [tok],
        logps=beam.logps + [logp],
        log_prob=beam.log_prob + logp,
        lp=lp,
        state=nxt,
        words_since=words_since,
        del_from=del_from,
        finished=finished,
        tie=tie,
    )


def score_hypothesis(model: RepairModel, x_ids: list[int],
                     tokens: list[EditToken] | tuple[EditToken, ...]) -> tuple[list[float], float]:
    """Re-score a finished hypothesis token by token through the model.

    Returns (per-token log-probs, their sum). The leading BOS scores 0. Uses
    the same unrenormalized distributions as the beam, so it reproduces the
    stored log-prob up to floating-point noise.
    """
    tokens = list(tokens)
    memory = model.encode(x_ids)
    penult, logits = model.decode_step(memory, tokens[:-1])
    logps = [0.0]
    v_all = None
    for t in range(1, len(tokens)):
        target = tokens[t]
        if target.kind is TokenKind.LOC:
            if v_all is None:
                v_all = model.pointer_latent(Tensor(penult)).data
            scores = (memory.data @ v_all[t - 1]).astype(np.float64)
            lp = scores - _logsumexp_rows(scores[None, :])[0]
            logps.append(float(lp[target.value]))
        else:
            row = logits[t - 1].astype(np.float64)
            lp = row - _logsumexp_rows(row[None, :])[0]
            logps.append(float(lp[model._token_embedding_id(target)]))
    return logps, float(sum(logps))


def hypothesis_to_fixed_code(x_ids: list[int], hyp: Hypothesis | list[EditToken],
                             vocab: Vocab | None = None) -> list[int]:
    """Parse a hypothesis and apply it to the buggy sequence.

    Anything that prevents application (grammar violation, bad ranges,
    conflicting actions) raises PredictionError; callers count it as an
    incorrect prediction rather than crashing.
    """
    tokens = list(hyp.tokens) if isinstance(hyp, Hypothesis) else list(hyp)
    try:
        program = parse(tokens)
        return apply_edits(list(x_ids), program)
    except (GrammarError, ProgramError, ApplyError) as e:
        raise PredictionError(str(e)) from e
