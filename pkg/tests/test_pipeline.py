import json

import numpy as np
import pytest

from editfix.data import read_jsonl, write_jsonl
from editfix.minilang import synthesize_bug_corpus
from editfix.pipeline import PipelineConfig, PipelineError, run_pipeline


def small_config(**overrides):
    base = dict(
        seed=9, n_pairs=60, vocab_size=380,
        d_model=32, n_heads=2, n_encoder_layers=1, n_decoder_layers=1,
        ffn_dim=32, epochs=2, batch_size=16, patience=9,
        beam_width=3, decode_max_len=16, decode_batch=16,
        rerank_epochs=1, rerank_max_instances=16, rerank_batch_instances=4,
        b_candidates=(0, 1), n_thresholds=6,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def identity_pairs(tmp_path_factory):
    # trivially learnable corpus: the fix is the no-op program
    root = tmp_path_factory.mktemp("pairs")
    rows = synthesize_bug_corpus(60, seed=1)
    pairs = [{"id": f"p{i}", "buggy": r["fixed"], "fixed": r["fixed"]}
             for i, r in enumerate(rows)]
    path = root / "identity.jsonl"
    write_jsonl(path, pairs)
    return str(path)


def test_pipeline_end_to_end_with_rerank(identity_pairs, tmp_path):
    cfg = small_config(input_pairs=identity_pairs, epochs=3)
    report = run_pipeline(cfg, tmp_path / "run")
    for name in ("pairs.jsonl", "vocab.json", "model.bin", "heads.bin",
                 "heads_finetuned.bin", "ensemble.json", "ranked_test.jsonl",
                 "report.json", "report.txt", "hyps_test.jsonl"):
        assert (tmp_path / "run" / name).exists(), name
    assert set(report.rows) == {"beam_only", "ensemble", "finetuned_ensemble"}
    width = cfg.beam_width
    for accs in report.rows.values():
        assert len(accs) == width
        assert all(a <= b + 1e-12 for a, b in zip(accs, accs[1:]))  # top-K monotone
    # reranking cannot change the top-(beam width) set
    assert report.rows["beam_only"][-1] == report.rows["ensemble"][-1]
    assert report.rows["beam_only"][-1] == report.rows["finetuned_ensemble"][-1]
    assert set(report.pr_curves) == {"log_prob", "ensemble"}
    # identity task is learnable in a couple of epochs
    assert report.rows["beam_only"][0] == 1.0


def test_pipeline_is_resumable(identity_pairs, tmp_path):
    cfg = small_config(input_pairs=identity_pairs, epochs=3)
    out = tmp_path / "run"
    run_pipeline(cfg, out)
    stamps = {p.name: p.stat().st_mtime_ns for p in out.iterdir()}
    report = run_pipeline(cfg, out)  # second call must skip all heavy stages
    for name in ("model.bin", "heads.bin", "heads_finetuned.bin", "vocab.json",
                 "pairs.jsonl"):
        assert (out / name).stat().st_mtime_ns == stamps[name], name
    assert report.rows["beam_only"][0] == 1.0


def test_pipeline_rejects_mismatched_config(identity_pairs, tmp_path):
    out = tmp_path / "run"
    run_pipeline(small_config(input_pairs=identity_pairs), out)
    with pytest.raises(PipelineError):
        run_pipeline(small_config(input_pairs=identity_pairs, seed=123), out)


def test_pipeline_beam_only_toggle(tmp_path):
    cfg = small_config(rerank_enabled=False, epochs=1)
    report = run_pipeline(cfg, tmp_path / "run")
    assert set(report.rows) == {"beam_only"}
    assert "ensemble" not in report.pr_curves
    assert not (tmp_path / "run" / "heads.bin").exists()


def test_pipeline_determinism_byte_identical(identity_pairs, tmp_path):
    cfg = small_config(input_pairs=identity_pairs, epochs=2)
    run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b")
    for name in ("report.json", "report.txt", "model.bin", "heads.bin",
                 "heads_finetuned.bin", "vocab.json", "ensemble.json"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, f"{name} differs between identical runs"


def test_config_json_roundtrip():
    cfg = small_config()
    doc = json.loads(cfg.to_json())
    again = PipelineConfig.from_dict(doc)
    assert again == cfg
    assert again.fingerprint() == cfg.fingerprint()
