import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from editfix.diffing import (
    ApplyError,
    DiffError,
    apply_edits,
    apply_edits_ascending,
    derive_edits,
    edit_stats,
    longest_matching_block,
    matching_blocks,
    opcodes,
    per_pair_counts,
)
from editfix.grammar import Delete, EditProgram, Insert, ProgramError, serialize
from helpers import random_program


def brute_force_longest(x, y):
    best = (0, 0, 0)
    for i in range(len(x)):
        for j in range(len(y)):
            k = 0
            while i + k < len(x) and j + k < len(y) and x[i + k] == y[j + k]:
                k += 1
            if k > best[2]:
                best = (i, j, k)
    return best


def lcs_diff_apply(x, y):
    """Quadratic LCS reference: rebuild y from x via a plain edit script."""
    n, m = len(x), len(y)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            dp[i, j] = dp[i + 1, j + 1] + 1 if x[i] == y[j] else max(dp[i + 1, j], dp[i, j + 1])
    out, i, j = [], 0, 0
    while i < n and j < m:
        if x[i] == y[j]:
            out.append(x[i]); i += 1; j += 1
        elif dp[i + 1, j] >= dp[i, j + 1]:
            i += 1
        else:
            out.append(y[j]); j += 1
    out.extend(y[j:])
    return out


def test_identical_sequences_full_match():
    x = [1, 2, 3, 4, 5]
    assert longest_matching_block(x, x) == (0, 0, 5)
    assert derive_edits(x, x) == EditProgram(())


def test_disjoint_alphabets_no_match():
    assert longest_matching_block([1, 2], [3, 4])[2] == 0


def test_single_substitution_block():
    x, y = [1, 2, 3, 4], [1, 9, 3, 4]
    # ties break to the smallest i then j; [3,4] at (2,2) beats [1] at (0,0) by length
    assert longest_matching_block(x, y) == (2, 2, 2)
    assert brute_force_longest(x, y) == (2, 2, 2)


def test_longest_match_against_brute_force():
    rng = np.random.default_rng(13)
    for _ in range(400):
        x = rng.integers(0, 5, size=rng.integers(0, 14)).tolist()
        y = rng.integers(0, 5, size=rng.integers(0, 14)).tolist()
        assert longest_matching_block(x, y) == brute_force_longest(x, y)


def test_opcodes_tile_both_sequences():
    rng = np.random.default_rng(17)
    for _ in range(200):
        x = rng.integers(0, 6, size=rng.integers(0, 20)).tolist()
        y = rng.integers(0, 6, size=rng.integers(0, 20)).tolist()
        ops = opcodes(x, y)
        ia = ja = 0
        for op in ops:
            assert (op.i1, op.j1) == (ia, ja)
            ia, ja = op.i2, op.j2
            if op.tag == "equal":
                assert x[op.i1:op.i2] == y[op.j1:op.j2]
        assert (ia, ja) == (len(x), len(y))
        # adjacent equal blocks are merged
        tags = [op.tag for op in ops]
        assert all(a != "equal" or b != "equal" for a, b in zip(tags, tags[1:]))


def test_replace_anchors_insert_at_range_end():
    x, y = [7, 1, 8, 9], [7, 2, 3, 8, 9]
    program = derive_edits(x, y)
    assert program == EditProgram((Delete(1, 2), Insert(2, (2, 3))))


def test_apply_identity_and_examples():
    x = [10, 11, 12]
    assert apply_edits(x, EditProgram(())) == x
    # full replacement with the insert anchored at the end of the deletion
    program = EditProgram((Delete(0, 3), Insert(3, (13,))))
    assert apply_edits(x, program) == [13]
    assert apply_edits_ascending(x, program) == [13]


def test_apply_out_of_range_is_apply_error():
    with pytest.raises(ApplyError):
        apply_edits([1, 2, 3], EditProgram((Insert(5, (9,)),)))
    with pytest.raises(ApplyError):
        apply_edits([1, 2, 3], EditProgram((Delete(1, 4),)))


def test_apply_overlap_is_domain_error():
    program = EditProgram((Delete(0, 2), Delete(1, 3)))
    with pytest.raises(ProgramError):
        apply_edits([1, 2, 3, 4], program)


def test_apply_delete_then_insert_at_same_location():
    # delete [1,3) and insert at 1: deletion applies first
    x = [0, 1, 2, 3]
    program = EditProgram((Delete(1, 3), Insert(1, (9,))))
    assert apply_edits(x, program) == [0, 9, 3]
    assert apply_edits_ascending(x, program) == [0, 9, 3]


def test_roundtrip_random_pairs():
    rng = np.random.default_rng(19)
    for _ in range(1500):
        x = rng.integers(0, 20, size=rng.integers(0, 40)).tolist()
        y = rng.integers(0, 20, size=rng.integers(0, 40)).tolist()
        program = derive_edits(x, y)
        assert apply_edits(x, program) == y
        assert apply_edits_ascending(x, program) == y


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.integers(0, 8), max_size=24),
    st.lists(st.integers(0, 8), max_size=24),
)
def test_roundtrip_property(x, y):
    assert apply_edits(x, derive_edits(x, y)) == y


def test_descending_equals_ascending_on_random_programs():
    rng = np.random.default_rng(23)
    for _ in range(400):
        seq_len = int(rng.integers(0, 15))
        x = rng.integers(0, 9, size=seq_len).tolist()
        program = random_program(rng, seq_len, word_ids=[100, 101, 102])
        assert apply_edits(x, program) == apply_edits_ascending(x, program)


def test_minimality_every_action_matters():
    rng = np.random.default_rng(29)
    checked = 0
    for _ in range(200):
        x = rng.integers(0, 6, size=rng.integers(1, 16)).tolist()
        y = rng.integers(0, 6, size=rng.integers(1, 16)).tolist()
        program = derive_edits(x, y)
        if x == y or not program.actions:
            continue
        checked += 1
        for drop in range(len(program.actions)):
            reduced = EditProgram(tuple(
                a for i, a in enumerate(program.actions) if i != drop
            ))
            assert apply_edits(x, reduced) != y
    assert checked > 50


def test_agreement_with_lcs_reference_on_roundtrip():
    rng = np.random.default_rng(31)
    for _ in range(300):
        x = rng.integers(0, 5, size=rng.integers(0, 18)).tolist()
        y = rng.integers(0, 5, size=rng.integers(0, 18)).tolist()
        assert apply_edits(x, derive_edits(x, y)) == lcs_diff_apply(x, y) == y


def test_input_too_long_rejected():
    with pytest.raises(DiffError):
        derive_edits(list(range(600)), [1], max_len=512)


def test_edit_stats_identical_pair():
    stats = edit_stats([([1, 2], [1, 2])])
    assert stats.edits_mean == 0 and stats.insertion_mean == 0
    assert stats.seq_len_mean == 2  # [BOS][EOS]
    assert stats.seq_len_median == 2


def test_edit_stats_match_brute_force_recount():
    rng = np.random.default_rng(37)
    pairs = []
    for _ in range(250):
        x = rng.integers(0, 12, size=rng.integers(0, 30)).tolist()
        y = rng.integers(0, 12, size=rng.integers(0, 30)).tolist()
        pairs.append((x, y))
    stats = edit_stats(pairs)
    # independent recount straight off the per-pair definition
    edits, inss, lens = [], [], []
    for x, y in pairs:
        program = derive_edits(x, y)
        edits.append(len(program.actions))
        inss.append(sum(len(a.words) for a in program.actions if isinstance(a, Insert)))
        lens.append(len(serialize(program)))
    n = len(pairs)
    assert stats.edits_mean == sum(edits) / n
    assert stats.insertion_mean == sum(inss) / n
    assert stats.seq_len_mean == sum(lens) / n
    assert stats.edits_median == sorted(edits)[(n - 1) // 2]
    assert stats.insertion_median == sorted(inss)[(n - 1) // 2]
    assert stats.seq_len_median == sorted(lens)[(n - 1) // 2]


def test_edit_stats_empty_corpus():
    with pytest.raises(DiffError):
        edit_stats([])


def test_per_pair_counts_shape():
    n_edits, ins_len, seq_len = per_pair_counts([1, 2, 3], [1, 9, 3])
    assert (n_edits, ins_len, seq_len) == (2, 1, 2 + 3 + 3)
