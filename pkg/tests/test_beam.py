import numpy as np
import pytest

from editfix.beam import (
    Hypothesis,
    PredictionError,
    beam_search,
    beam_search_batch,
    hypothesis_to_fixed_code,
    length_penalty,
    score_hypothesis,
)
from editfix.grammar import (
    Delete,
    EditProgram,
    EditToken,
    Insert,
    parse,
    serialize,
    token_to_id,
)
from editfix.model import InputError, ModelConfig, RepairModel
from helpers import enumerate_complete_sequences, tiny_word_vocab


@pytest.fixture(scope="module")
def vocab():
    return tiny_word_vocab(3)


def tiny_model(vocab, seed=0):
    cfg = ModelConfig(
        vocab_size=vocab.size, d_model=16, n_heads=2, n_encoder_layers=1,
        n_decoder_layers=2, ffn_dim=16, max_len=16, dropout=0.0,
    )
    return RepairModel(cfg, vocab, seed=seed, dtype=np.float64)


def oracle_ranking(model, vocab, x, max_len, alpha):
    scored = []
    for toks in enumerate_complete_sequences(len(x), max_len):
        _, total = score_hypothesis(model, x, toks)
        lp = total / length_penalty(len(toks), alpha)
        scored.append((lp, tuple(token_to_id(t, vocab) for t in toks), toks))
    scored.sort(key=lambda e: (-e[0], e[1]))
    return scored


def test_length_penalty_formula():
    assert length_penalty(1, 0.6) == pytest.approx(1.0)
    assert length_penalty(7, 0.6) == pytest.approx(2.0 ** 0.6)
    assert length_penalty(5, 0.0) == 1.0


def test_invalid_parameters_rejected(vocab):
    model = tiny_model(vocab)
    with pytest.raises(InputError):
        beam_search(model, [0], K=0)
    with pytest.raises(InputError):
        beam_search(model, [0], K=1, max_len=1)
    with pytest.raises(InputError):
        beam_search(model, [99], K=1)


def test_every_hypothesis_parses_and_scores_sum(vocab):
    rng = np.random.default_rng(0)
    for seed in range(5):
        model = tiny_model(vocab, seed=seed)
        x = rng.integers(0, 3, size=rng.integers(0, 6)).tolist()
        for hyp in beam_search(model, x, K=5, max_len=8, alpha=0.6):
            parse(list(hyp.tokens))  # must not raise
            assert hyp.finished
            assert abs(sum(hyp.token_logprobs) - hyp.log_prob) < 1e-9
            penalty = length_penalty(len(hyp.tokens), 0.6)
            assert hyp.lp_score == pytest.approx(hyp.log_prob / penalty)
            for tok in hyp.tokens:
                if tok.kind.name == "LOC":
                    assert tok.value <= len(x)


def test_beam_one_equals_greedy(vocab):
    # with K = 1 the surviving beam extends with the locally best legal token
    model = tiny_model(vocab, seed=3)
    x = [0, 1, 2]
    hyps = beam_search(model, x, K=1, max_len=8, alpha=0.6)
    assert len(hyps) == 1
    logps, total = score_hypothesis(model, x, list(hyps[0].tokens))
    assert total == pytest.approx(hyps[0].log_prob, abs=1e-6)


def test_rescoring_reproduces_stored_log_prob(vocab):
    rng = np.random.default_rng(1)
    model = tiny_model(vocab, seed=11)
    for _ in range(10):
        x = rng.integers(0, 3, size=rng.integers(0, 6)).tolist()
        for hyp in beam_search(model, x, K=4, max_len=8, alpha=0.6):
            logps, total = score_hypothesis(model, x, list(hyp.tokens))
            assert total == pytest.approx(hyp.log_prob, abs=1e-5)
            np.testing.assert_allclose(logps, hyp.token_logprobs, atol=1e-5)


def test_beam_matches_exhaustive_oracle_with_full_width(vocab):
    rng = np.random.default_rng(2)
    for seed in range(8):
        model = tiny_model(vocab, seed=seed + 50)
        x = rng.integers(0, 3, size=int(rng.integers(0, 5))).tolist()
        scored = oracle_ranking(model, vocab, x, max_len=6, alpha=0.6)
        hyps = beam_search(model, x, K=len(scored), max_len=6, alpha=0.6)
        assert len(hyps) == len(scored)
        top_ids = tuple(token_to_id(t, vocab) for t in hyps[0].tokens)
        assert top_ids == scored[0][1]
        assert hyps[0].lp_score == pytest.approx(scored[0][0], abs=1e-9)


def test_narrow_beam_never_beats_oracle(vocab):
    rng = np.random.default_rng(3)
    for seed in range(8):
        model = tiny_model(vocab, seed=seed + 80)
        x = rng.integers(0, 3, size=int(rng.integers(0, 5))).tolist()
        best = oracle_ranking(model, vocab, x, max_len=6, alpha=0.6)[0][0]
        hyps = beam_search(model, x, K=5, max_len=6, alpha=0.6)
        assert hyps[0].lp_score <= best + 1e-9


def test_monotone_pool_law(vocab):
    model = tiny_model(vocab, seed=21)
    trace = []
    beam_search(model, [0, 1, 2], K=3, max_len=8, alpha=0.6, trace=trace)
    assert trace
    for step in trace:
        if step["survivor_lp"] and step["discarded_lp"]:
            assert min(step["survivor_lp"]) >= max(step["discarded_lp"]) - 1e-12


def test_hypotheses_sorted_and_unique(vocab):
    model = tiny_model(vocab, seed=33)
    hyps = beam_search(model, [0, 1], K=5, max_len=8, alpha=0.6)
    lps = [h.lp_score for h in hyps]
    assert lps == sorted(lps, reverse=True)
    seqs = [tuple((t.kind, t.value) for t in h.tokens) for h in hyps]
    assert len(set(seqs)) == len(seqs)


def test_batch_matches_single(vocab):
    model = tiny_model(vocab, seed=13)
    xs = [[0, 1, 2], [], [2, 2], [1]]
    batched = beam_search_batch(model, xs, K=3, max_len=7, alpha=0.6, batch_size=2)
    for x, hyps in zip(xs, batched):
        single = beam_search(model, x, K=3, max_len=7, alpha=0.6)
        assert [h.tokens for h in single] == [h.tokens for h in hyps]
        for a, b in zip(single, hyps):
            assert a.log_prob == pytest.approx(b.log_prob, abs=1e-9)


def test_empty_input_only_inserts(vocab):
    model = tiny_model(vocab, seed=44)
    for hyp in beam_search(model, [], K=5, max_len=8, alpha=0.6):
        program = parse(list(hyp.tokens))
        assert all(isinstance(a, Insert) for a in program.actions)
        assert all(a.at == 0 for a in program.actions)


def test_max_len_respected_and_forced_eos(vocab):
    model = tiny_model(vocab, seed=55)
    for max_len in (2, 3, 5, 6):
        hyps = beam_search(model, [0, 1], K=5, max_len=max_len, alpha=0.6)
        assert hyps, f"no hypotheses at max_len={max_len}"
        assert all(len(h.tokens) <= max_len for h in hyps)
    only = beam_search(model, [0, 1], K=5, max_len=2, alpha=0.6)
    assert [t.kind.name for t in only[0].tokens] == ["BOS", "EOS"]
    assert len(only) == 1


def test_hypothesis_to_fixed_code(vocab):
    x = [0, 1, 2]
    noop = [EditToken.bos(), EditToken.eos()]
    assert hypothesis_to_fixed_code(x, noop) == x
    program = EditProgram((Delete(1, 2), Insert(2, (2, 2))))
    assert hypothesis_to_fixed_code(x, serialize(program)) == [0, 2, 2, 2]
    # out-of-range location is a prediction error, never a crash
    bad = serialize(EditProgram((Delete(1, 2),)))
    with pytest.raises(PredictionError):
        hypothesis_to_fixed_code([0], bad)


def test_random_program_application_matches_direct_apply(vocab):
    from editfix.diffing import apply_edits
    from helpers import random_program

    rng = np.random.default_rng(5)
    for _ in range(100):
        x = rng.integers(0, 3, size=int(rng.integers(0, 8))).tolist()
        program = random_program(rng, len(x), word_ids=[0, 1, 2])
        assert hypothesis_to_fixed_code(x, serialize(program)) == apply_edits(x, program)
