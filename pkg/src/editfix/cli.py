"""Command-line interface: one subcommand per pipeline stage plus run-pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .beam import beam_search_batch
from .bpe import TokenizerError, Vocab, decode as bpe_decode, encode_batch, train_bpe
from .data import IngestError, ingest, read_jsonl, rows_to_examples, write_jsonl
from .diffing import apply_edits, edit_stats
from .evaluation import exact_match_topk, pr_sweep
from .grammar import ids_to_tokens, parse, program_to_text, tokens_to_ids
from .minilang import MUTATION_CLASSES, synthesize_bug_corpus
from .model import ModelConfig, RepairModel
from .pipeline import PipelineConfig, build_rerank_instances, run_pipeline
from .rerank import (
    ensemble_rank,
    finetune_on_validation,
    grid_search_coefficients,
    load_heads,
    save_heads,
    score_instances,
    top_k_accuracies,
    train_heads,
)
from .training import TrainSettings, train_model

log = logging.getLogger("editfix")


def _read_corpus(path: Path) -> list[str]:
    if path.is_dir():
        docs = []
        for p in sorted(path.rglob("*.txt")):
            docs.append(p.read_text(encoding="utf-8"))
        if not docs:
            raise TokenizerError(f"no .txt files under {path}")
        return docs
    rows = read_jsonl(path)
    docs = []
    for row in rows:
        docs.append(row["buggy"])
        if "fixed" in row:
            docs.append(row["fixed"])
    return docs


def cmd_tokenizer_train(args) -> int:
    vocab = train_bpe(_read_corpus(Path(args.corpus)), args.vocab_size)
    vocab.save(args.out)
    print(f"trained vocabulary of {vocab.size} tokens "
          f"({len(vocab.merges)} merges) -> {args.out}")
    return 0


def cmd_synthesize(args) -> int:
    classes = tuple(args.classes.split(",")) if args.classes else MUTATION_CLASSES
    rows = synthesize_bug_corpus(
        args.n, seed=args.seed, classes=classes,
        double_frac=args.double_frac, normalize=args.normalize_identifiers,
    )
    write_jsonl(args.out, rows)
    print(f"wrote {len(rows)} pairs -> {args.out}")
    return 0


def cmd_derive_edits(args) -> int:
    vocab = Vocab.load(args.vocab)
    pairs = read_jsonl(args.pairs)
    examples, filtered = ingest(pairs, vocab, max_len=args.max_len)
    write_jsonl(args.out, [
        {"id": e.id, "x_ids": e.x_ids, "y_ids": e.y_ids, "edit_ids": e.edit_ids}
        for e in examples
    ])
    if args.text_out:
        with open(args.text_out, "w", encoding="utf-8") as f:
            for e in examples:
                program = parse(ids_to_tokens(e.edit_ids, vocab))
                f.write(program_to_text(program, vocab))
                f.write("\n")
    print(f"derived {len(examples)} edit programs ({filtered} filtered) -> {args.out}")
    return 0


def cmd_apply_edits(args) -> int:
    vocab = Vocab.load(args.vocab)
    rows = read_jsonl(args.edits)
    out_rows = []
    for row in rows:
        program = parse(ids_to_tokens(list(row["edit_ids"]), vocab))
        fixed_ids = apply_edits(list(row["x_ids"]), program)
        out_rows.append({"id": row["id"], "fixed": bpe_decode(vocab, fixed_ids)})
    write_jsonl(args.out, out_rows)
    print(f"applied {len(out_rows)} programs -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    vocab = Vocab.load(args.vocab)
    pairs = read_jsonl(args.pairs)
    xs = encode_batch(vocab, [r["buggy"] for r in pairs])
    ys = encode_batch(vocab, [r["fixed"] for r in pairs])
    stats = edit_stats(list(zip(xs, ys)), max_len=args.max_len)
    doc = stats.as_dict()
    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=2, sort_keys=True),
                                   encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    vocab = Vocab.load(args.vocab)
    cfg_doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model_doc = dict(cfg_doc.get("model", {}))
    model_doc.setdefault("vocab_size", vocab.size)
    model_cfg = ModelConfig.from_dict(model_doc)
    settings = TrainSettings.from_dict(cfg_doc.get("train", {}))
    examples = rows_to_examples(read_jsonl(args.data))
    if args.val_data:
        valid = rows_to_examples(read_jsonl(args.val_data))
        train = examples
    else:
        val_frac = cfg_doc.get("val_fraction", 0.1)
        rng = np.random.default_rng([settings.seed, 4242])
        perm = rng.permutation(len(examples))
        n_val = max(1, int(round(val_frac * len(examples))))
        valid = [examples[int(i)] for i in perm[:n_val]]
        train = [examples[int(i)] for i in perm[n_val:]]
    model = RepairModel(model_cfg, vocab, seed=settings.seed)
    result = train_model(model, train, valid, settings,
                         state_path=args.state, resume=args.resume)
    model.load_state_dict(result.best_state)
    model.save(args.out, extra_manifest={"best_val_em": result.best_val_em,
                                         "best_epoch": result.best_epoch})
    print(f"trained {result.epochs_run} epochs; best val EM "
          f"{result.best_val_em:.4f} at epoch {result.best_epoch} -> {args.out}")
    if result.diverged:
        print("training diverged; saved the last good checkpoint", file=sys.stderr)
        return 1
    return 0


def cmd_predict(args) -> int:
    vocab = Vocab.load(args.vocab)
    model = RepairModel.load(args.ckpt, vocab)
    rows = read_jsonl(args.input)
    xs = encode_batch(vocab, [r["buggy"] for r in rows])
    hyp_lists = beam_search_batch(model, xs, K=args.beam, max_len=args.max_len,
                                  alpha=args.alpha, batch_size=args.batch_size)
    out_rows = []
    for i, (row, hyps) in enumerate(zip(rows, hyp_lists)):
        out_rows.append({
            "id": str(row.get("id", i)),
            "hypotheses": [
                {"tokens": tokens_to_ids(list(h.tokens), vocab),
                 "log_prob": h.log_prob, "lp_score": h.lp_score}
                for h in hyps
            ],
        })
    write_jsonl(args.out, out_rows)
    print(f"decoded {len(out_rows)} inputs (beam {args.beam}) -> {args.out}")
    return 0


def _load_instances(hyps_path, gold_path, vocab):
    gold = {str(r["id"]): r for r in read_jsonl(gold_path)}
    hyp_rows = read_jsonl(hyps_path)
    examples = []
    for row in hyp_rows:
        if str(row["id"]) not in gold:
            raise IngestError(f"hypotheses id {row['id']} missing from gold data")
    examples = rows_to_examples([gold[str(r["id"])] for r in hyp_rows])
    return build_rerank_instances(examples, hyp_rows, vocab)


def cmd_rerank_train(args) -> int:
    vocab = Vocab.load(args.vocab)
    model = RepairModel.load(args.ckpt, vocab)
    instances, _ = _load_instances(args.hyps, args.gold, vocab)
    seq_head, enc_head, info = train_heads(
        model, instances, epochs=args.epochs, lr=args.lr,
        temperature=args.temperature, seed=args.seed,
        batch_instances=args.batch_instances,
    )
    save_heads(args.out, seq_head, enc_head, {"train_info": info})
    print(f"trained rerankers on {info['n_train_instances']} instances "
          f"({info['n_filtered_out']} filtered) -> {args.out}")
    return 0


def cmd_rerank_tune(args) -> int:
    vocab = Vocab.load(args.vocab)
    seq_head, enc_head, _ = load_heads(args.heads, vocab)
    instances, _ = _load_instances(args.val, args.gold, vocab)
    score_instances(seq_head, enc_head, instances, args.temperature)
    (c1, c2), grid_info = grid_search_coefficients(instances)
    ft_seq, ft_enc, ft_info = finetune_on_validation(
        seq_head, enc_head, instances, coefficients=(c1, c2),
        b_candidates=tuple(int(b) for b in args.b_candidates.split(",")),
        lr=args.lr, temperature=args.temperature, seed=args.seed,
    )
    doc = {"c1": c1, "c2": c2, "temperature": args.temperature,
           "grid": grid_info, "finetune": ft_info}
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    if args.finetuned_out:
        save_heads(args.finetuned_out, ft_seq, ft_enc, {"finetune_info": ft_info})
    print(f"ensemble c1={c1:.4f} c2={c2:.4f} (b={ft_info['chosen_b']}) -> {args.out}")
    return 0


def cmd_rerank_apply(args) -> int:
    vocab = Vocab.load(args.vocab)
    seq_head, enc_head, _ = load_heads(args.heads, vocab)
    instances, _ = _load_instances(args.hyps, args.gold, vocab)
    c1, c2 = (float(v) for v in args.weights.split(","))
    score_instances(seq_head, enc_head, instances, args.temperature)
    orders = ensemble_rank(instances, c1, c2)
    out_rows = []
    for inst, order in zip(instances, orders):
        out_rows.append({
            "id": inst.id,
            "order": list(order),
            "hypotheses": [
                {"tokens": c.edit_ids, "log_prob": c.log_prob, "lp_score": c.lp_score,
                 "score_transformer": c.score_t, "score_encoder": c.score_e,
                 "ensemble": c.ensemble, "applied": c.applied_ids is not None,
                 "correct": c.correct}
                for c in inst.candidates
            ],
        })
    write_jsonl(args.out, out_rows)
    width = max(len(inst.candidates) for inst in instances)
    accs = top_k_accuracies(instances, orders, width)
    print(f"reranked {len(instances)} instances; top-1 {accs[0]:.4f} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    vocab = Vocab.load(args.vocab)
    gold_rows = read_jsonl(args.gold)
    ranked_rows = read_jsonl(args.ranked)
    gold = {str(r["id"]): list(r["y_ids"]) for r in gold_rows}
    x_by_id = {str(r["id"]): list(r["x_ids"]) for r in gold_rows}
    predictions: dict[str, list[list[int] | None]] = {}
    width = args.width
    for row in ranked_rows:
        order = row.get("order", list(range(len(row["hypotheses"]))))
        x = x_by_id.get(str(row["id"]))
        if x is None:
            raise IngestError(f"ranked id {row['id']} missing from gold data")
        ranked_applied = []
        for idx in order:
            tokens = ids_to_tokens(list(row["hypotheses"][idx]["tokens"]), vocab)
            try:
                ranked_applied.append(apply_edits(x, parse(tokens)))
            except ValueError:
                ranked_applied.append(None)
        predictions[str(row["id"])] = ranked_applied
        width = max(width, len(ranked_applied))
    accs = exact_match_topk(predictions, gold, width)
    doc = {f"top_{k+1}": acc for k, acc in enumerate(accs)}
    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True),
                                  encoding="utf-8")
    return 0


def cmd_pr_sweep(args) -> int:
    ranked_rows = read_jsonl(args.ranked)
    ens_points, raw_points = [], []
    for row in ranked_rows:
        order = row.get("order", list(range(len(row["hypotheses"]))))
        hyps = row["hypotheses"]
        if not hyps:
            continue
        top_ens = hyps[order[0]]
        ens_points.append((float(top_ens["ensemble"]), bool(top_ens["correct"])))
        top_raw = max(range(len(hyps)), key=lambda i: (hyps[i]["log_prob"], -i))
        raw_points.append((float(hyps[top_raw]["log_prob"]), bool(hyps[top_raw]["correct"])))
    doc = {
        "ensemble": pr_sweep(ens_points, args.n_thresholds),
        "log_prob": pr_sweep(raw_points, args.n_thresholds),
    }
    print(json.dumps({k: v[:3] for k, v in doc.items()}, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True),
                                  encoding="utf-8")
    return 0


def cmd_run_pipeline(args) -> int:
    import os

    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    # Environment overrides are for paths only.
    if os.environ.get("EDITFIX_INPUT_PAIRS"):
        config.input_pairs = os.environ["EDITFIX_INPUT_PAIRS"]
    out_dir = os.environ.get("EDITFIX_OUT_DIR") or args.out_dir
    if not out_dir:
        print("error: --out-dir or EDITFIX_OUT_DIR is required", file=sys.stderr)
        return 2
    report = run_pipeline(config, out_dir, resume=not args.no_resume)
    print(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="editfix",
        description="Token-level code repair via edit-script prediction",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenizer-train", help="train the byte-level BPE vocabulary")
    p.add_argument("--corpus", required=True, help="directory of .txt files or a pairs.jsonl")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenizer_train)

    p = sub.add_parser("synthesize", help="generate a synthetic bug corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", default="", help="comma-separated mutation classes")
    p.add_argument("--double-frac", type=float, default=0.25)
    p.add_argument("--normalize-identifiers", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("derive-edits", help="tokenize pairs and derive gold edit programs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--text-out", default=None, help="also write human-readable programs")
    p.add_argument("--max-len", type=int, default=512)
    p.set_defaults(func=cmd_derive_edits)

    p = sub.add_parser("apply-edits", help="apply edit programs to their buggy inputs")
    p.add_argument("--edits", required=True, help="output of derive-edits")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_apply_edits)

    p = sub.add_parser("stats", help="editing-sequence statistics of a corpus")
    p.add_argument("--pairs", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--json", default=None, help="also write the stats as JSON")
    p.add_argument("--max-len", type=int, default=512)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the repair model with teacher forcing")
    p.add_argument("--config", required=True, help="JSON: {model: {...}, train: {...}}")
    p.add_argument("--data", required=True, help="output of derive-edits")
    p.add_argument("--vocab", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--state", default=None, help="resumable training state path")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="beam-search editing sequences for buggy inputs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help="pairs.jsonl (only 'buggy' is used)")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--max-len", type=int, default=48)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("rerank-train", help="train the two reranking heads")
    p.add_argument("--hyps", required=True)
    p.add_argument("--gold", required=True, help="derive-edits output with y_ids")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-instances", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank_train)

    p = sub.add_parser("rerank-tune", help="grid-search the ensemble and fine-tune heads")
    p.add_argument("--val", required=True, help="validation hypotheses")
    p.add_argument("--gold", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--b-candidates", default="1,2,3")
    p.add_argument("--finetuned-out", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank_tune)

    p = sub.add_parser("rerank-apply", help="rank hypotheses with the ensemble score")
    p.add_argument("--hyps", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--weights", required=True, help='"c1,c2"')
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank_apply)

    p = sub.add_parser("evaluate", help="top-K exact match of ranked hypotheses")
    p.add_argument("--ranked", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--width", type=int, default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pr-sweep", help="precision/recall sweep over confidence scores")
    p.add_argument("--ranked", required=True)
    p.add_argument("--n-thresholds", type=int, default=50)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pr_sweep)

    p = sub.add_parser("run-pipeline", help="run every stage end to end")
    p.add_argument("--config", default=None, help="PipelineConfig JSON (defaults if omitted)")
    p.add_argument("--out-dir", default=None,
                   help="run directory (or set EDITFIX_OUT_DIR)")
    p.add_argument("--no-resume", action="store_true")
    p.set_defaults(func=cmd_run_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
