import numpy as np
import pytest

from editfix.bpe import MIN_VOCAB_SIZE, train_bpe, encode_batch
from editfix.data import IngestError, ingest, read_jsonl, rows_to_examples, split_pairs, write_jsonl
from editfix.diffing import apply_edits, derive_edits
from editfix.grammar import ids_to_tokens, parse
from editfix.minilang import (
    MUTATION_CLASSES,
    apply_mutations,
    generate_program,
    mutation_sites,
    normalize_identifiers,
    synthesize_bug_corpus,
)


def test_zero_mutations_requested():
    assert synthesize_bug_corpus(0, seed=1) == []


def test_unknown_class_rejected():
    with pytest.raises(ValueError):
        synthesize_bug_corpus(1, classes=("not_a_class",))


def test_operator_swap_degrades_and_restores():
    tokens = "return ( a && b ) ;".split()
    sites = [s for s in mutation_sites(tokens, ("operator_swap",))]
    assert len(sites) == 1
    buggy = apply_mutations(tokens, sites)
    assert buggy == "return ( a & b ) ;".split()


def test_corpus_pairs_differ_and_roundtrip():
    rows = synthesize_bug_corpus(150, seed=7, double_frac=0.4)
    assert len(rows) == 150
    assert all(r["buggy"] != r["fixed"] for r in rows)
    vocab = train_bpe([r["fixed"] for r in rows] + [r["buggy"] for r in rows], 450)
    xs = encode_batch(vocab, [r["buggy"] for r in rows])
    ys = encode_batch(vocab, [r["fixed"] for r in rows])
    for x, y in zip(xs, ys):
        assert apply_edits(x, derive_edits(x, y)) == y


def test_corpus_is_seeded_deterministic():
    a = synthesize_bug_corpus(40, seed=5)
    b = synthesize_bug_corpus(40, seed=5)
    c = synthesize_bug_corpus(40, seed=6)
    assert a == b
    assert a != c


def test_every_requested_class_appears():
    rows = synthesize_bug_corpus(400, seed=3, classes=MUTATION_CLASSES, double_frac=0.5)
    seen = set()
    for r in rows:
        seen.update(r["classes"])
    assert seen == set(MUTATION_CLASSES)
    n_double = sum(1 for r in rows if len(r["classes"]) == 2)
    assert 0 < n_double < len(rows)


def test_degraded_forms_never_in_seed_programs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        program = generate_program(rng)
        assert not ({"&", "|", "="} & set(program))
        assert "<" not in program


def test_normalize_identifiers_consistent():
    tokens = "@Override public Quality getName ( Quality q ) { return q . rate ; }".split()
    out = normalize_identifiers(tokens)
    assert out.count("TYPE_1") == 2
    assert "METHOD_1" in out and "VAR_1" in out and "VAR_2" in out
    assert out[0] == "@Override"  # structure untouched


def test_normalized_corpus_roundtrips():
    rows = synthesize_bug_corpus(60, seed=11, normalize=True)
    assert any("VAR_1" in r["fixed"] for r in rows)
    vocab = train_bpe([r["fixed"] for r in rows], 400)
    xs = encode_batch(vocab, [r["buggy"] for r in rows])
    ys = encode_batch(vocab, [r["fixed"] for r in rows])
    for x, y in zip(xs, ys):
        assert apply_edits(x, derive_edits(x, y)) == y


def test_ingest_filters_and_caches(tmp_path):
    rows = synthesize_bug_corpus(30, seed=2)
    incompressible = " ".join(str(i) for i in range(300))
    rows.append({"id": "long", "buggy": incompressible, "fixed": incompressible})
    vocab = train_bpe([r["buggy"] for r in rows] + [r["fixed"] for r in rows], 420)
    examples, filtered = ingest(rows, vocab, max_len=64)
    assert filtered >= 1
    assert len(examples) + filtered == len(rows)
    # cached gold edits equal on-the-fly re-derivation
    for e in examples[:10]:
        program = parse(ids_to_tokens(e.edit_ids, vocab))
        assert apply_edits(e.x_ids, program) == e.y_ids
        assert derive_edits(e.x_ids, e.y_ids) == program


def test_ingest_identical_pair_kept_with_empty_program():
    vocab = train_bpe(["same text"], MIN_VOCAB_SIZE)
    examples, filtered = ingest([{"id": "s", "buggy": "same", "fixed": "same"}], vocab)
    assert filtered == 0
    toks = ids_to_tokens(examples[0].edit_ids, vocab)
    assert parse(toks).actions == ()


def test_ingest_missing_field_is_error():
    vocab = train_bpe(["abc"], MIN_VOCAB_SIZE)
    with pytest.raises(IngestError):
        ingest([{"buggy": "a"}], vocab)


def test_jsonl_roundtrip_and_line_numbers(tmp_path):
    rows = [{"id": "a", "x": 1}, {"id": "b", "x": 2}]
    path = tmp_path / "rows.jsonl"
    write_jsonl(path, rows)
    assert read_jsonl(path) == rows
    path.write_text('{"ok": 1}\nnot json\n', encoding="utf-8")
    with pytest.raises(IngestError, match=":2"):
        read_jsonl(path)


def test_split_pairs_disjoint_and_seeded():
    rows = [{"id": str(i)} for i in range(100)]
    splits = split_pairs(rows, (0.8, 0.1, 0.1), seed=4)
    ids = [r["id"] for s in ("train", "valid", "test") for r in splits[s]]
    assert sorted(ids) == sorted(r["id"] for r in rows)
    assert len(splits["train"]) == 80 and len(splits["valid"]) == 10
    again = split_pairs(rows, (0.8, 0.1, 0.1), seed=4)
    assert splits == again
    with pytest.raises(IngestError):
        split_pairs(rows, (0.5, 0.2, 0.2), seed=0)
