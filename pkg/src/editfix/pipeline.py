"""End-to-end orchestration: synthesize -> tokenize -> derive -> train ->
decode -> rerank -> evaluate, with per-stage artifacts and resume.

Every stage writes its artifact into the run directory and is skipped on
rerun when the artifact already exists and the stored config fingerprint
matches. All randomness is derived from the config seed, so two runs with the
same config produce byte-identical reports and checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .beam import PredictionError, beam_search_batch, hypothesis_to_fixed_code
from .bpe import Vocab, train_bpe
from .data import (
    Example,
    IngestError,
    examples_to_rows,
    ingest,
    read_jsonl,
    rows_to_examples,
    split_pairs,
    write_jsonl,
)
from .diffing import edit_stats
from .evaluation import EvalReport, pr_sweep, top1_points
from .grammar import ids_to_tokens, tokens_to_ids
from .minilang import synthesize_bug_corpus
from .model import ModelConfig, RepairModel
from .rerank import (
    RankedCandidate,
    RerankError,
    RerankInstance,
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

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A stage failed or the run directory does not match the config."""


@dataclass
class PipelineConfig:
    seed: int = 0
    # corpus
    n_pairs: int = 5000
    mutation_classes: tuple[str, ...] = ("operator_swap", "bool_flip", "drop_token")
    double_frac: float = 0.3
    normalize_identifiers: bool = False
    input_pairs: str | None = None  # use an existing pairs.jsonl instead of synthesis
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # tokenizer
    vocab_size: int = 500
    # model
    d_model: int = 128
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    ffn_dim: int = 256
    max_len: int = 512
    dropout: float = 0.1
    # training
    epochs: int = 20
    batch_size: int = 32
    peak_lr: float = 5e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    patience: int = 5
    # decoding
    beam_width: int = 5
    decode_max_len: int = 48
    alpha: float = 0.6
    decode_batch: int = 64
    # reranking
    rerank_enabled: bool = True
    rerank_epochs: int = 4
    rerank_max_instances: int | None = 600
    rerank_lr: float = 1e-4
    rerank_batch_instances: int = 8
    temperature: float = 0.5
    b_candidates: tuple[int, ...] = (1, 2, 3)
    # report
    n_thresholds: int = 50

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mutation_classes"] = list(self.mutation_classes)
        d["split_fractions"] = list(self.split_fractions)
        d["b_candidates"] = list(self.b_candidates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        for key in ("mutation_classes", "split_fractions", "b_candidates"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        ).hexdigest()

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
            n_encoder_layers=self.n_encoder_layers, n_decoder_layers=self.n_decoder_layers,
            ffn_dim=self.ffn_dim, max_len=self.max_len, dropout=self.dropout,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs, batch_size=self.batch_size, peak_lr=self.peak_lr,
            warmup_frac=self.warmup_frac, weight_decay=self.weight_decay,
            patience=self.patience, seed=self.seed,
            decode_max_len=self.decode_max_len, decode_alpha=self.alpha,
        )


def _stage(out_dir: Path, name: str):
    """Log a stage banner and time it."""

    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()
            log.info("[%s] stage %s ...", out_dir.name, name)
            return self

        def __exit__(self, *exc):
            log.info("[%s] stage %s done in %.1fs", out_dir.name, name,
                     time.perf_counter() - self.t0)
            return False

    return _Timer()


def logprob_orders(instances: list[RerankInstance]) -> list[list[int]]:
    """Per instance, candidate indices by descending raw log-probability,
    ties to the earlier candidate (the degenerate c1 = c2 = 0 ensemble)."""
    return [
        sorted(range(len(inst.candidates)),
               key=lambda i: (-inst.candidates[i].log_prob, i))
        for inst in instances
    ]


def build_rerank_instances(examples: list[Example], hyp_rows: list[dict],
                           vocab: Vocab) -> tuple[list[RerankInstance], int]:
    """Attach applied code and correctness to every hypothesis.

    Returns (instances, application_failures). A hypothesis that cannot be
    applied keeps applied_ids=None and counts as incorrect.
    """
    by_id = {row["id"]: row for row in hyp_rows}
    instances = []
    failures = 0
    for ex in examples:
        row = by_id.get(ex.id)
        if row is None:
            raise IngestError(f"no hypotheses for instance {ex.id}")
        cands = []
        for h in row["hypotheses"]:
            tokens = ids_to_tokens(list(h["tokens"]), vocab)
            try:
                applied = hypothesis_to_fixed_code(ex.x_ids, tokens)
            except PredictionError:
                applied = None
                failures += 1
            cands.append(RankedCandidate(
                edit_ids=list(h["tokens"]),
                log_prob=float(h["log_prob"]),
                lp_score=float(h["lp_score"]),
                applied_ids=applied,
                correct=applied == ex.y_ids,
            ))
        instances.append(RerankInstance(
            id=ex.id, x_ids=ex.x_ids, gold_y_ids=ex.y_ids, candidates=cands,
        ))
    return instances, failures


def _decode_split(model: RepairModel, examples: list[Example],
                  cfg: PipelineConfig) -> list[dict]:
    hyp_lists = beam_search_batch(
        model, [e.x_ids for e in examples], K=cfg.beam_width,
        max_len=cfg.decode_max_len, alpha=cfg.alpha, batch_size=cfg.decode_batch,
    )
    rows = []
    for ex, hyps in zip(examples, hyp_lists):
        rows.append({
            "id": ex.id,
            "hypotheses": [
                {
                    "tokens": tokens_to_ids(list(h.tokens), model.vocab),
                    "log_prob": h.log_prob,
                    "lp_score": h.lp_score,
                }
                for h in hyps
            ],
        })
    return rows


def run_pipeline(config: PipelineConfig, out_dir, resume: bool = True) -> EvalReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    if cfg_path.exists():
        existing = PipelineConfig.from_file(cfg_path)
        if existing.fingerprint() != config.fingerprint():
            raise PipelineError(
                f"{out} was produced with a different config; refusing to mix artifacts"
            )
        if not resume:
            raise PipelineError(f"{out} already contains a run and resume is disabled")
    else:
        cfg_path.write_text(config.to_json(), encoding="utf-8")

    # 1. corpus
    pairs_path = out / "pairs.jsonl"
    if not pairs_path.exists():
        with _stage(out, "synthesize"):
            if config.input_pairs:
                pairs = read_jsonl(config.input_pairs)
            else:
                pairs = synthesize_bug_corpus(
                    config.n_pairs, seed=config.seed,
                    classes=config.mutation_classes,
                    double_frac=config.double_frac,
                    normalize=config.normalize_identifiers,
                )
            write_jsonl(pairs_path, pairs)
    pairs = read_jsonl(pairs_path)

    # 2. splits
    split_paths = {s: out / f"pairs_{s}.jsonl" for s in ("train", "valid", "test")}
    if not all(p.exists() for p in split_paths.values()):
        with _stage(out, "split"):
            splits = split_pairs(pairs, config.split_fractions, config.seed)
            for s, rows in splits.items():
                write_jsonl(split_paths[s], rows)
    split_rows = {s: read_jsonl(p) for s, p in split_paths.items()}

    # 3. tokenizer
    vocab_path = out / "vocab.json"
    if not vocab_path.exists():
        with _stage(out, "tokenizer"):
            corpus = [r["buggy"] for r in split_rows["train"]]
            corpus += [r["fixed"] for r in split_rows["train"]]
            vocab = train_bpe(corpus, config.vocab_size)
            vocab.save(vocab_path)
    vocab = Vocab.load(vocab_path)

    # 4. derive gold edits
    data_paths = {s: out / f"data_{s}.jsonl" for s in split_rows}
    meta_path = out / "ingest_meta.json"
    if not all(p.exists() for p in data_paths.values()) or not meta_path.exists():
        with _stage(out, "derive"):
            filtered = {}
            for s, rows in split_rows.items():
                examples, n_filtered = ingest(rows, vocab, max_len=config.max_len)
                write_jsonl(data_paths[s], examples_to_rows(examples))
                filtered[s] = n_filtered
            meta_path.write_text(json.dumps(filtered, sort_keys=True), encoding="utf-8")
    datasets = {s: rows_to_examples(read_jsonl(p)) for s, p in data_paths.items()}
    filtered_counts = json.loads(meta_path.read_text(encoding="utf-8"))

    # 5. train the main model
    model_path = out / "model.bin"
    train_meta_path = out / "train_meta.json"
    model_cfg = config.model_config(vocab.size)
    if not model_path.exists():
        with _stage(out, "train"):
            model = RepairModel(model_cfg, vocab, seed=config.seed)
            result = train_model(
                model, datasets["train"], datasets["valid"], config.train_settings(),
                state_path=out / "train_state.bin",
                resume=(out / "train_state.bin").exists(),
            )
            model.load_state_dict(result.best_state)
            model.save(model_path)
            train_meta_path.write_text(json.dumps({
                "best_epoch": result.best_epoch,
                "best_val_em": result.best_val_em,
                "epochs_run": result.epochs_run,
                "stopped_early": result.stopped_early,
                "diverged": result.diverged,
                "history": result.history,
            }, sort_keys=True, indent=2), encoding="utf-8")
    model = RepairModel.load(model_path, vocab)
    train_meta = json.loads(train_meta_path.read_text(encoding="utf-8"))

    # 6. beam search for reranker data and evaluation
    rr_train_path = out / "hyps_rerank_train.jsonl"
    hyps_paths = {"valid": out / "hyps_valid.jsonl", "test": out / "hyps_test.jsonl"}
    if config.rerank_enabled and not rr_train_path.exists():
        with _stage(out, "decode-train"):
            pool = datasets["train"]
            if config.rerank_max_instances and len(pool) > config.rerank_max_instances:
                rng = np.random.default_rng([config.seed, 777])
                idx = rng.choice(len(pool), size=config.rerank_max_instances, replace=False)
                pool = [pool[int(i)] for i in sorted(idx)]
            write_jsonl(rr_train_path, _decode_split(model, pool, config))
    for s, p in hyps_paths.items():
        if not p.exists():
            with _stage(out, f"decode-{s}"):
                write_jsonl(p, _decode_split(model, datasets[s], config))

    by_id = {s: {e.id: e for e in datasets[s]} for s in datasets}
    test_rows = read_jsonl(hyps_paths["test"])
    test_examples = [by_id["test"][r["id"]] for r in test_rows]
    test_instances, app_failures = build_rerank_instances(test_examples, test_rows, vocab)
    # The beam-only baseline ranks by the raw log-probability (the beam search
    # score), which is exactly the ensemble ordering at c1 = c2 = 0.
    beam_orders = logprob_orders(test_instances)
    beam_accs = top_k_accuracies(test_instances, beam_orders, config.beam_width)

    rows: dict[str, list[float]] = {"beam_only": beam_accs}
    coefficients: dict = {"temperature": config.temperature}
    pr_curves: dict[str, list[dict]] = {
        "log_prob": pr_sweep(top1_points(test_instances, beam_orders, "log_prob"),
                             config.n_thresholds),
    }

    rerank_active = config.rerank_enabled
    if rerank_active:
        # 7. train heads
        heads_path = out / "heads.bin"
        if not heads_path.exists():
            with _stage(out, "rerank-train"):
                rr_rows = read_jsonl(rr_train_path)
                rr_examples = [by_id["train"][r["id"]] for r in rr_rows]
                rr_instances, _ = build_rerank_instances(rr_examples, rr_rows, vocab)
                try:
                    seq_head, enc_head, info = train_heads(
                        model, rr_instances, epochs=config.rerank_epochs,
                        lr=config.rerank_lr, temperature=config.temperature,
                        seed=config.seed, batch_instances=config.rerank_batch_instances,
                        weight_decay=config.weight_decay,
                    )
                except RerankError as e:
                    # Degenerate run (beam never finds a correct edit): report
                    # the beam-only rows rather than failing the whole run.
                    log.warning("reranker training skipped: %s", e)
                    rerank_active = False
                    coefficients["skipped"] = str(e)
                else:
                    save_heads(heads_path, seq_head, enc_head, {"train_info": info})
    if rerank_active:
        seq_head, enc_head, _ = load_heads(heads_path, vocab)

        # 8. grid-search ensemble coefficients on validation
        ens_path = out / "ensemble.json"
        valid_rows = read_jsonl(hyps_paths["valid"])
        valid_examples = [by_id["valid"][r["id"]] for r in valid_rows]
        valid_instances, _ = build_rerank_instances(valid_examples, valid_rows, vocab)
        if not ens_path.exists():
            with _stage(out, "rerank-tune"):
                score_instances(seq_head, enc_head, valid_instances, config.temperature)
                (c1, c2), grid_info = grid_search_coefficients(valid_instances)
                ens_path.write_text(json.dumps({
                    "c1": c1, "c2": c2, "temperature": config.temperature,
                    "grid": grid_info,
                }, sort_keys=True, indent=2), encoding="utf-8")
        ens = json.loads(ens_path.read_text(encoding="utf-8"))
        c1, c2 = ens["c1"], ens["c2"]

        # 9. fine-tune heads on validation
        ft_path = out / "heads_finetuned.bin"
        if not ft_path.exists():
            with _stage(out, "rerank-finetune"):
                score_instances(seq_head, enc_head, valid_instances, config.temperature)
                ft_seq, ft_enc, ft_info = finetune_on_validation(
                    seq_head, enc_head, valid_instances,
                    coefficients=(c1, c2), b_candidates=config.b_candidates,
                    lr=config.rerank_lr * 0.1, temperature=config.temperature,
                    seed=config.seed, batch_instances=config.rerank_batch_instances,
                    weight_decay=config.weight_decay,
                )
                save_heads(ft_path, ft_seq, ft_enc, {"finetune_info": ft_info})
        ft_seq, ft_enc, ft_manifest = load_heads(ft_path, vocab)
        coefficients.update({
            "c1": c1, "c2": c2,
            "grid": ens.get("grid", {}),
            "chosen_b": ft_manifest.get("finetune_info", {}).get("chosen_b"),
            "finetune": ft_manifest.get("finetune_info", {}),
        })

        # 10. final ranking on test with both head generations
        with _stage(out, "evaluate"):
            score_instances(seq_head, enc_head, test_instances, config.temperature)
            orders = ensemble_rank(test_instances, c1, c2)
            rows["ensemble"] = top_k_accuracies(test_instances, orders, config.beam_width)

            score_instances(ft_seq, ft_enc, test_instances, config.temperature)
            ft_orders = ensemble_rank(test_instances, c1, c2)
            rows["finetuned_ensemble"] = top_k_accuracies(test_instances, ft_orders,
                                                          config.beam_width)
            pr_curves["ensemble"] = pr_sweep(
                top1_points(test_instances, ft_orders, "ensemble"), config.n_thresholds
            )
            ranked_rows = []
            for inst, order in zip(test_instances, ft_orders):
                ranked_rows.append({
                    "id": inst.id,
                    "order": list(order),
                    "hypotheses": [
                        {
                            "tokens": c.edit_ids,
                            "log_prob": c.log_prob,
                            "lp_score": c.lp_score,
                            "score_transformer": c.score_t,
                            "score_encoder": c.score_e,
                            "ensemble": c.ensemble,
                            "applied": c.applied_ids is not None,
                            "correct": c.correct,
                        }
                        for c in inst.candidates
                    ],
                })
            write_jsonl(out / "ranked_test.jsonl", ranked_rows)

    # 11. dataset statistics and the report
    with _stage(out, "report"):
        stats = edit_stats(
            [(e.x_ids, e.y_ids) for e in datasets["train"]], max_len=config.max_len
        )
        report = EvalReport(
            config_fingerprint=config.fingerprint(),
            split_sizes={s: len(datasets[s]) for s in datasets},
            beam_width=config.beam_width,
            rows=rows,
            pr_curves=pr_curves,
            edit_stats=stats.as_dict(),
            coefficients=coefficients,
            application_failures=app_failures,
            filtered_overlength=filtered_counts,
            training={
                "best_epoch": train_meta["best_epoch"],
                "best_val_em": train_meta["best_val_em"],
                "epochs_run": train_meta["epochs_run"],
                "stopped_early": train_meta["stopped_early"],
                "diverged": train_meta["diverged"],
            },
        )
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    return report
