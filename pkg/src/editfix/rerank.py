"""Hypothesis reranking: two scoring heads, a linear ensemble, and tuning.

Both heads map one (buggy input, hypothesis) pair to a raw scalar through the
same network for every hypothesis of an instance (a Siamese setup). Within an
instance the K raw scalars are turned into scores by a temperature
log-softmax, and the final ranking score blends them with the beam
log-probability:

    s = log_prob + c1 * score_sequence + c2 * score_encoder

The sequence head is a copy of the full repair model scored at the final
token's penultimate activation; the encoder head is a copy of the encoder
scored at the hypothesis BOS position of the concatenated (input, hypothesis)
sequence, with a learned embedding table for its location tokens. Both carry
a fresh one-layer feed-forward readout to a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .grammar import EditToken, TokenKind, ids_to_tokens
from .model import InputError, ModelConfig, RepairModel
from .optim import AdamW, triangular_lr
from .tensor import Parameter, Tensor, no_grad


class RerankError(ValueError):
    """Configuration or data problem in reranker training or tuning."""


@dataclass
class RankedCandidate:
    """One beam hypothesis with every score component kept for auditing."""

    edit_ids: list[int]          # id-space edit tokens (locations offset by |V|)
    log_prob: float              # beam log-probability (log product)
    lp_score: float              # length-penalized beam score
    applied_ids: list[int] | None = None  # result of applying the edits, if it applied
    correct: bool = False
    score_t: float | None = None  # sequence-head score (Siamese log-softmax)
    score_e: float | None = None  # encoder-head score
    ensemble: float | None = None


@dataclass
class RerankInstance:
    """All candidates for one input, in original beam order."""

    id: str
    x_ids: list[int]
    gold_y_ids: list[int] | None
    candidates: list[RankedCandidate] = field(default_factory=list)

    def label(self) -> int | None:
        """Index of the highest-beam-rank correct candidate, if any."""
        for i, c in enumerate(self.candidates):
            if c.correct:
                return i
        return None


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


class SequenceHead:
    """Encoder-decoder reranker scored at the end-of-sequence position."""

    kind = "sequence"

    def __init__(self, model: RepairModel, seed: int = 0):
        self.model = model
        h = model.config.d_model
        rng = np.random.default_rng(seed)
        self.readout_w = Parameter("rerank/readout_w", rng.normal(0.0, 0.02, (h, 1)).astype(model.dtype))
        self.readout_b = Parameter("rerank/readout_b", np.zeros(1, dtype=model.dtype))

    def trainable_params(self) -> list[Parameter]:
        return self.model.parameters() + [self.readout_w, self.readout_b]

    def raw_scores(self, chunk: list[tuple[list[int], list[list[EditToken]]]],
                   train: bool = False, rng=None) -> Tensor:
        """Raw scalars for every hypothesis in the chunk, flattened in order."""
        model = self.model
        vocab = model.vocab
        dtype = model.dtype
        B = len(chunk)
        enc_ids = np.full((B, max(len(x) for x, _ in chunk) + 1), vocab.pad_id, dtype=np.int64)
        enc_len = np.zeros(B, dtype=np.int64)
        for b, (x, _) in enumerate(chunk):
            enc_ids[b, : len(x)] = x
            enc_ids[b, len(x)] = vocab.eos_id
            enc_len[b] = len(x) + 1
        memory = model.encoder_forward(enc_ids, enc_len, train, rng)
        Lm = memory.shape[1]

        rows: list[tuple[int, list[EditToken]]] = []
        for b, (_, hyps) in enumerate(chunk):
            for toks in hyps:
                rows.append((b, toks))
        N = len(rows)
        Tn = max(len(toks) for _, toks in rows)
        word_ids = np.full((N, Tn), vocab.pad_id, dtype=np.int64)
        loc_ids = np.zeros((N, Tn), dtype=np.int64)
        is_word = np.zeros((N, Tn, 1), dtype=dtype)
        last = np.zeros(N, dtype=np.int64)
        inst = np.zeros(N, dtype=np.int64)
        for r, (b, toks) in enumerate(rows):
            inst[r] = b
            last[r] = len(toks) - 1
            for t, tok in enumerate(toks):
                if tok.kind is TokenKind.LOC:
                    if tok.value >= enc_len[b]:
                        raise InputError(f"location {tok.value} outside memory of instance {b}")
                    loc_ids[r, t] = tok.value
                else:
                    word_ids[r, t] = model._token_embedding_id(tok)
                    is_word[r, t, 0] = 1.0
        mem_flat = T.reshape(memory, (B * Lm, model.config.d_model))
        row_gather = inst[:, None] * Lm + np.arange(Lm)[None, :]
        mem_rows = T.embedding_gather(mem_flat, row_gather)
        flat_loc = loc_ids + inst[:, None] * Lm
        wemb = T.embedding_gather(model.params["emb/tok"], word_ids)
        lemb = T.embedding_gather(mem_flat, flat_loc)
        in_emb = T.add(T.scale(wemb, is_word), T.scale(lemb, 1.0 - is_word))
        prefix_len = last + 1
        penult, _ = model.decoder_forward(mem_rows, enc_len[inst], in_emb, prefix_len, train, rng)
        pen_flat = T.reshape(penult, (N * Tn, model.config.d_model))
        site = T.embedding_gather(pen_flat, np.arange(N, dtype=np.int64) * Tn + last)
        raw = T.add(T.matmul(site, self.readout_w), self.readout_b)
        return T.reshape(raw, (N,))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        out["readout_w"] = self.readout_w.data.copy()
        out["readout_b"] = self.readout_b.data.copy()
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        self.model.load_state_dict(
            {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
        )
        self.readout_w.data = arrays["readout_w"].astype(self.model.dtype)
        self.readout_b.data = arrays["readout_b"].astype(self.model.dtype)

    def clone(self) -> "SequenceHead":
        other = SequenceHead(self.model.clone(), seed=0)
        other.readout_w.data = self.readout_w.data.copy()
        other.readout_b.data = self.readout_b.data.copy()
        return other


class EncoderHead:
    """Encoder-only reranker scored at the hypothesis BOS position."""

    kind = "encoder"

    def __init__(self, model: RepairModel, seed: int = 0):
        self.model = model
        cfg = model.config
        rng = np.random.default_rng(seed)
        self.loc_emb = Parameter(
            "rerank/loc_emb", rng.normal(0.0, 0.02, (cfg.max_len + 1, cfg.d_model)).astype(model.dtype)
        )
        self.readout_w = Parameter("rerank/readout_w", rng.normal(0.0, 0.02, (cfg.d_model, 1)).astype(model.dtype))
        self.readout_b = Parameter("rerank/readout_b", np.zeros(1, dtype=model.dtype))

    def trainable_params(self) -> list[Parameter]:
        names = ["emb/tok", "emb/enc_pos", "enc/ln_f/g", "enc/ln_f/b"]
        for i in range(self.model.config.n_encoder_layers):
            for suffix in ("attn/wq", "attn/wk", "attn/wv", "attn/wo",
                           "attn/bq", "attn/bk", "attn/bv", "attn/bo",
                           "ln1/g", "ln1/b", "ln2/g", "ln2/b",
                           "ffn/w1", "ffn/b1", "ffn/w2", "ffn/b2"):
                names.append(f"enc{i}/{suffix}")
        return [self.model.params[n] for n in names] + [self.loc_emb, self.readout_w, self.readout_b]

    def raw_scores(self, chunk: list[tuple[list[int], list[list[EditToken]]]],
                   train: bool = False, rng=None) -> Tensor:
        model = self.model
        cfg = model.config
        vocab = model.vocab
        dtype = model.dtype
        rows: list[tuple[list[int], list[EditToken]]] = []
        for x, hyps in chunk:
            for toks in hyps:
                rows.append((x, toks))
        N = len(rows)
        Lc = max(len(x) + len(toks) for x, toks in rows)
        if Lc > cfg.max_len + 1:
            raise InputError(f"joint sequence length {Lc} exceeds position budget {cfg.max_len + 1}")
        word_ids = np.full((N, Lc), vocab.pad_id, dtype=np.int64)
        loc_ids = np.zeros((N, Lc), dtype=np.int64)
        is_word = np.zeros((N, Lc, 1), dtype=dtype)
        length = np.zeros(N, dtype=np.int64)
        site = np.zeros(N, dtype=np.int64)
        for r, (x, toks) in enumerate(rows):
            for t, wid in enumerate(x):
                word_ids[r, t] = wid
                is_word[r, t, 0] = 1.0
            site[r] = len(x)  # hypothesis [BOS] position
            for t, tok in enumerate(toks, start=len(x)):
                if tok.kind is TokenKind.LOC:
                    loc_ids[r, t] = tok.value
                else:
                    word_ids[r, t] = model._token_embedding_id(tok)
                    is_word[r, t, 0] = 1.0
            length[r] = len(x) + len(toks)
        wemb = T.embedding_gather(model.params["emb/tok"], word_ids)
        lemb = T.embedding_gather(self.loc_emb, loc_ids)
        mixed = T.add(T.scale(wemb, is_word), T.scale(lemb, 1.0 - is_word))
        pos = T.slice_(model.params["emb/enc_pos"], (slice(0, Lc),))
        out = model.encoder_layers(T.add(mixed, pos), length, train, rng)
        out_flat = T.reshape(out, (N * Lc, cfg.d_model))
        at_bos = T.embedding_gather(out_flat, np.arange(N, dtype=np.int64) * Lc + site)
        raw = T.add(T.matmul(at_bos, self.readout_w), self.readout_b)
        return T.reshape(raw, (N,))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        out["loc_emb"] = self.loc_emb.data.copy()
        out["readout_w"] = self.readout_w.data.copy()
        out["readout_b"] = self.readout_b.data.copy()
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        self.model.load_state_dict(
            {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
        )
        self.loc_emb.data = arrays["loc_emb"].astype(self.model.dtype)
        self.readout_w.data = arrays["readout_w"].astype(self.model.dtype)
        self.readout_b.data = arrays["readout_b"].astype(self.model.dtype)

    def clone(self) -> "EncoderHead":
        other = EncoderHead(self.model.clone(), seed=0)
        other.loc_emb.data = self.loc_emb.data.copy()
        other.readout_w.data = self.readout_w.data.copy()
        other.readout_b.data = self.readout_b.data.copy()
        return other


def save_heads(path, seq_head: SequenceHead, enc_head: EncoderHead,
               extra_manifest: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, v in seq_head.state_dict().items():
        arrays[f"sequence_head/{k}"] = v
    for k, v in enc_head.state_dict().items():
        arrays[f"encoder_head/{k}"] = v
    manifest = {"kind": "rerank_heads", "config": seq_head.model.config.to_dict()}
    if extra_manifest:
        manifest.update(extra_manifest)
    save_checkpoint(path, arrays, manifest)


def load_heads(path, vocab, dtype=np.float32) -> tuple[SequenceHead, EncoderHead, dict]:
    arrays, manifest = load_checkpoint(path)
    config = ModelConfig.from_dict(manifest["config"])
    seq_head = SequenceHead(RepairModel(config, vocab, seed=0, dtype=dtype))
    enc_head = EncoderHead(RepairModel(config, vocab, seed=0, dtype=dtype))
    seq_head.load_state_dict(
        {k[len("sequence_head/"):]: v for k, v in arrays.items() if k.startswith("sequence_head/")}
    )
    enc_head.load_state_dict(
        {k[len("encoder_head/"):]: v for k, v in arrays.items() if k.startswith("encoder_head/")}
    )
    return seq_head, enc_head, manifest


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max()
    z = x - m
    return z - np.log(np.exp(z).sum())


def head_scores(head, x_ids: list[int], hyp_tokens: list[list[EditToken]],
                temperature: float = 0.5) -> np.ndarray:
    """Eq.-style scores: log-softmax of the K raw scalars divided by T.

    Every hypothesis goes through the same head; K = 1 gives exactly 0.
    """
    if not hyp_tokens:
        raise RerankError("no hypotheses to score")
    if temperature <= 0:
        raise RerankError(f"temperature {temperature} must be positive")
    with no_grad():
        raw = head.raw_scores([(x_ids, hyp_tokens)]).data.astype(np.float64)
    return _log_softmax(raw / temperature)


def score_instances(seq_head: SequenceHead, enc_head: EncoderHead,
                    instances: list[RerankInstance], temperature: float = 0.5,
                    batch_instances: int = 16) -> None:
    """Fill score_t / score_e on every candidate, in place."""
    vocab = seq_head.model.vocab
    for lo in range(0, len(instances), batch_instances):
        batch = instances[lo : lo + batch_instances]
        chunk = [
            (inst.x_ids, [ids_to_tokens(c.edit_ids, vocab) for c in inst.candidates])
            for inst in batch
        ]
        with no_grad():
            raw_t = seq_head.raw_scores(chunk).data.astype(np.float64)
            raw_e = enc_head.raw_scores(chunk).data.astype(np.float64)
        off = 0
        for inst in batch:
            k = len(inst.candidates)
            st = _log_softmax(raw_t[off : off + k] / temperature)
            se = _log_softmax(raw_e[off : off + k] / temperature)
            for i, c in enumerate(inst.candidates):
                c.score_t = float(st[i])
                c.score_e = float(se[i])
            off += k


def ensemble_scores(inst: RerankInstance, c1: float, c2: float) -> np.ndarray:
    if any(c.score_t is None or c.score_e is None for c in inst.candidates):
        raise RerankError(f"instance {inst.id}: head scores missing")
    return np.array(
        [c.log_prob + c1 * c.score_t + c2 * c.score_e for c in inst.candidates],
        dtype=np.float64,
    )


def ensemble_rank(instances: list[RerankInstance], c1: float, c2: float
                  ) -> list[list[int]]:
    """Per instance, candidate indices sorted by descending ensemble score.

    The sort is stable, so ties keep the original beam order. Candidate
    ``ensemble`` fields are filled in place.
    """
    orders = []
    for inst in instances:
        s = ensemble_scores(inst, c1, c2)
        for c, val in zip(inst.candidates, s):
            c.ensemble = float(val)
        order = sorted(range(len(s)), key=lambda i: (-s[i], i))
        orders.append(order)
    return orders


def top_k_accuracies(instances: list[RerankInstance], orders: list[list[int]] | None,
                     width: int) -> list[float]:
    """Top-K exact-match accuracy for K = 1..width under the given candidate order."""
    if not instances:
        raise RerankError("no instances to evaluate")
    hits = np.zeros(width)
    for idx, inst in enumerate(instances):
        order = orders[idx] if orders is not None else list(range(len(inst.candidates)))
        for k in range(width):
            if any(inst.candidates[i].correct for i in order[: k + 1]):
                hits[k] += 1
    return [float(h) / len(instances) for h in hits]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def filter_trainable(instances: list[RerankInstance]) -> list[RerankInstance]:
    """Keep exactly the instances whose beam produced a correct hypothesis."""
    return [inst for inst in instances if inst.label() is not None]


def _train_one_head(head, instances: list[RerankInstance], *, epochs: int,
                    lr: float, temperature: float, seed: int,
                    batch_instances: int, weight_decay: float,
                    use_schedule: bool = True) -> None:
    vocab = head.model.vocab
    opt = AdamW(head.trainable_params(), lr=lr, weight_decay=weight_decay)
    n = len(instances)
    steps_per_epoch = (n + batch_instances - 1) // batch_instances
    total_steps = max(1, epochs * steps_per_epoch)
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 1 if head.kind == "sequence" else 2, epoch])
        perm = rng.permutation(n)
        for lo in range(0, n, batch_instances):
            batch = [instances[int(i)] for i in perm[lo : lo + batch_instances]]
            chunk = [
                (inst.x_ids, [ids_to_tokens(c.edit_ids, vocab) for c in inst.candidates])
                for inst in batch
            ]
            raw = head.raw_scores(chunk, train=True, rng=rng)
            losses = []
            off = 0
            for inst in batch:
                k = len(inst.candidates)
                logits = T.reshape(T.scale(raw[(slice(off, off + k),)], 1.0 / temperature), (1, k))
                losses.append(T.cross_entropy(logits, np.array([inst.label()])))
                off += k
            loss = T.mean_(T.concat(losses, axis=0))
            T.backward(loss)
            step += 1
            rate = triangular_lr(step, total_steps, lr) if use_schedule else lr
            opt.step(lr=rate)
            opt.zero_grad()


def train_heads(main_model: RepairModel, instances: list[RerankInstance], *,
                epochs: int = 12, lr: float = 1e-4, temperature: float = 0.5,
                seed: int = 0, batch_instances: int = 8,
                weight_decay: float = 0.01) -> tuple[SequenceHead, EncoderHead, dict]:
    """Train both heads as K-way classifiers over beam hypotheses.

    Instances without a correct hypothesis are filtered out; the class label
    is the highest-beam-rank correct hypothesis. Heads warm-start from copies
    of the trained main model.
    """
    usable = filter_trainable(instances)
    if not usable:
        raise RerankError("no training instance has a correct hypothesis")
    seq_head = SequenceHead(main_model.clone(), seed=seed + 11)
    enc_head = EncoderHead(main_model.clone(), seed=seed + 12)
    for head in (seq_head, enc_head):
        _train_one_head(
            head, usable, epochs=epochs, lr=lr, temperature=temperature,
            seed=seed, batch_instances=batch_instances, weight_decay=weight_decay,
        )
    info = {"n_train_instances": len(usable), "n_filtered_out": len(instances) - len(usable)}
    return seq_head, enc_head, info


# ---------------------------------------------------------------------------
# ensemble tuning
# ---------------------------------------------------------------------------


def _padded_score_arrays(instances: list[RerankInstance]):
    kmax = max(len(inst.candidates) for inst in instances)
    n = len(instances)
    logp = np.full((n, kmax), -np.inf)
    st = np.zeros((n, kmax))
    se = np.zeros((n, kmax))
    correct = np.zeros((n, kmax), dtype=bool)
    for i, inst in enumerate(instances):
        for j, c in enumerate(inst.candidates):
            logp[i, j] = c.log_prob
            st[i, j] = c.score_t
            se[i, j] = c.score_e
            correct[i, j] = c.correct
    return logp, st, se, correct


def _top1_at(logp, st, se, correct, c1: float, c2: float) -> float:
    s = logp + c1 * st + c2 * se
    best = np.argmax(s, axis=1)  # first index wins ties = beam order
    return float(correct[np.arange(len(best)), best].mean())


def grid_search_coefficients(instances: list[RerankInstance]
                             ) -> tuple[tuple[float, float], dict]:
    """Two-stage grid over (c1, c2): 10 log-spaced points per axis on
    [0.01, 100], then 20 linear points per axis on [0.1, 2]. Returns the
    argmax of validation top-1 exact match; ties go to the smaller pair."""
    if not instances:
        raise RerankError("empty validation set for the coefficient grid search")
    logp, st, se, correct = _padded_score_arrays(instances)
    stage1 = np.geomspace(0.01, 100.0, 10)
    stage2 = np.linspace(0.1, 2.0, 20)
    best_pair = None
    best_acc = -1.0
    evaluated = []
    for grid in (stage1, stage2):
        for c1 in grid:
            for c2 in grid:
                acc = _top1_at(logp, st, se, correct, float(c1), float(c2))
                evaluated.append({"c1": float(c1), "c2": float(c2), "top1": acc})
                pair = (float(c1), float(c2))
                if acc > best_acc or (acc == best_acc and pair < best_pair):
                    best_acc = acc
                    best_pair = pair
    info = {
        "best_top1": best_acc,
        "baseline_top1": _top1_at(logp, st, se, correct, 0.0, 0.0),
        "n_points": len(evaluated),
    }
    return best_pair, info


def finetune_on_validation(seq_head: SequenceHead, enc_head: EncoderHead,
                           instances: list[RerankInstance], *,
                           coefficients: tuple[float, float],
                           b_candidates: tuple[int, ...] = (1, 2, 3),
                           lr: float = 1e-5, temperature: float = 0.5,
                           seed: int = 0, batch_instances: int = 8,
                           weight_decay: float = 0.01
                           ) -> tuple[SequenceHead, EncoderHead, dict]:
    """Pick the fine-tuning epoch count b on a 75:25 re-split, then fine-tune
    fresh copies of both heads on 100% of the validation set for that b.

    The ensemble coefficients are used as given and never re-searched.
    """
    n = len(instances)
    n75 = int(round(0.75 * n))
    if n75 == 0 or n75 == n:
        raise RerankError(f"validation set of {n} instances is too small for a 75:25 split")
    rng = np.random.default_rng([seed, 7525])
    perm = rng.permutation(n)
    part75 = [instances[int(i)] for i in perm[:n75]]
    part25 = [instances[int(i)] for i in perm[n75:]]
    train75 = filter_trainable(part75)
    c1, c2 = coefficients

    def tuned_accuracy(b: int) -> float:
        sh, eh = seq_head.clone(), enc_head.clone()
        if b > 0 and train75:
            for head in (sh, eh):
                _train_one_head(head, train75, epochs=b, lr=lr, temperature=temperature,
                                seed=seed + 100, batch_instances=batch_instances,
                                weight_decay=weight_decay, use_schedule=False)
        score_instances(sh, eh, part25, temperature)
        orders = ensemble_rank(part25, c1, c2)
        return top_k_accuracies(part25, orders, 1)[0]

    best_b = None
    best_acc = -1.0
    trials = {}
    for b in b_candidates:
        acc = tuned_accuracy(int(b))
        trials[int(b)] = acc
        if acc > best_acc or (acc == best_acc and (best_b is None or b < best_b)):
            best_acc = acc
            best_b = int(b)

    final_seq, final_enc = seq_head.clone(), enc_head.clone()
    full_train = filter_trainable(instances)
    if best_b > 0 and full_train:
        for head in (final_seq, final_enc):
            _train_one_head(head, full_train, epochs=best_b, lr=lr, temperature=temperature,
                            seed=seed + 200, batch_instances=batch_instances,
                            weight_decay=weight_decay, use_schedule=False)
    info = {"chosen_b": best_b, "split_accuracies": trials, "n_tune_instances": len(full_train)}
    return final_seq, final_enc, info


# ---------------------------------------------------------------------------
# confidence thresholding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdPoint:
    threshold: float
    precision: float
    recall: float
    accepted: int
    correct_accepted: int
    total: int


def confidence_threshold(points: list[tuple[float, bool]], threshold: float) -> ThresholdPoint:
    """Partition top-1 predictions by score >= threshold.

    precision = correct accepted / accepted (1.0 when nothing is accepted);
    recall = accepted / total. A threshold of -inf accepts everything, giving
    (overall accuracy, 100%).
    """
    if not points:
        raise RerankError("no scored instances")
    accepted = [(s, c) for s, c in points if s >= threshold]
    n_acc = len(accepted)
    n_cor = sum(1 for _, c in accepted if c)
    precision = n_cor / n_acc if n_acc else 1.0
    recall = n_acc / len(points)
    return ThresholdPoint(
        threshold=float(threshold), precision=precision, recall=recall,
        accepted=n_acc, correct_accepted=n_cor, total=len(points),
    )
