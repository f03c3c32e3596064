"""Encoder-decoder repair model with a two-mode decoder.

The encoder reads the buggy tokens plus one terminal boundary token, so its
memory has a row for every edit location 0..L (row L backs end-of-sequence
inserts). The decoder predicts either word/action tokens through a softmax
head or edit locations through a pointer head that dots a latent vector
against the memory rows. Location tokens entering the decoder are embedded by
slicing the same memory, never by a learned location embedding.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .bpe import Vocab
from .grammar import (
    EditToken,
    FsmState,
    TokenKind,
    fsm_next,
    valid_token_kinds,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .tensor import NumericError, Parameter, ShapeError, Tensor


class InputError(ValueError):
    """Model input violates a precondition (length, emptiness, alignment)."""


class TrainingDataError(ValueError):
    """A training example is not a valid (buggy, edit sequence) pair."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    ffn_dim: int = 256
    max_len: int = 512
    dropout: float = 0.1

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.d_model, self.n_heads, self.n_encoder_layers, self.n_decoder_layers,
               self.ffn_dim, self.max_len, self.vocab_size) <= 0:
            raise ValueError("all size fields must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _dropout(x: Tensor, rate: float, train: bool, rng) -> Tensor:
    if not train or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return T.scale(x, mask)


class RepairModel:
    """The trainable model plus its forward passes. Parameters live in a flat
    name -> Parameter registry so checkpoints and the optimizer can address
    them uniformly."""

    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0,
                 dtype=np.float32):
        config.validate()
        if vocab.size != config.vocab_size:
            raise InputError(f"vocab size {vocab.size} != config vocab_size {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters ----------------------------------------------------------

    def _p(self, name: str, data: np.ndarray) -> Parameter:
        p = Parameter(name, data.astype(self.dtype))
        self.params[name] = p
        return p

    def _init_params(self, rng) -> None:
        c = self.config
        h, f, v = c.d_model, c.ffn_dim, c.vocab_size

        def normal(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        self._p("emb/tok", normal(v, h))
        self._p("emb/enc_pos", normal(c.max_len + 1, h))
        self._p("emb/dec_pos", normal(c.max_len, h))
        for i in range(c.n_encoder_layers):
            self._init_attn(f"enc{i}/attn", rng)
            self._init_ln(f"enc{i}/ln1")
            self._init_ln(f"enc{i}/ln2")
            self._p(f"enc{i}/ffn/w1", normal(h, f))
            self._p(f"enc{i}/ffn/b1", np.zeros(f))
            self._p(f"enc{i}/ffn/w2", normal(f, h))
            self._p(f"enc{i}/ffn/b2", np.zeros(h))
        self._init_ln("enc/ln_f")
        for i in range(c.n_decoder_layers):
            self._init_attn(f"dec{i}/self", rng)
            self._init_attn(f"dec{i}/cross", rng)
            self._init_ln(f"dec{i}/ln1")
            self._init_ln(f"dec{i}/ln2")
            self._init_ln(f"dec{i}/ln3")
            self._p(f"dec{i}/ffn/w1", normal(h, f))
            self._p(f"dec{i}/ffn/b1", np.zeros(f))
            self._p(f"dec{i}/ffn/w2", normal(f, h))
            self._p(f"dec{i}/ffn/b2", np.zeros(h))
        self._init_ln("dec/ln_f")
        self._p("out/w", normal(h, v))
        self._p("out/b", np.zeros(v))
        self._p("ptr/w", normal(h, h))
        self._p("ptr/b", np.zeros(h))

    def _init_attn(self, prefix: str, rng) -> None:
        h = self.config.d_model
        for nm in ("wq", "wk", "wv", "wo"):
            self._p(f"{prefix}/{nm}", rng.normal(0.0, 0.02, size=(h, h)))
        for nm in ("bq", "bk", "bv", "bo"):
            self._p(f"{prefix}/{nm}", np.zeros(h))

    def _init_ln(self, prefix: str) -> None:
        h = self.config.d_model
        self._p(f"{prefix}/g", np.ones(h))
        self._p(f"{prefix}/b", np.zeros(h))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ShapeError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: checkpoint {arrays[name].shape} vs model {p.data.shape}"
                )
            p.data = np.ascontiguousarray(arrays[name]).astype(self.dtype)
            p.grad = None

    def save(self, path, extra_manifest: dict | None = None) -> None:
        manifest = {"kind": "repair_model", "config": self.config.to_dict()}
        if extra_manifest:
            manifest.update(extra_manifest)
        save_checkpoint(path, self.state_dict(), manifest)

    @classmethod
    def load(cls, path, vocab: Vocab, dtype=np.float32) -> "RepairModel":
        arrays, manifest = load_checkpoint(path)
        config = ModelConfig.from_dict(manifest["config"])
        model = cls(config, vocab, seed=0, dtype=dtype)
        model.load_state_dict(arrays)
        return model

    def clone(self) -> "RepairModel":
        other = RepairModel(self.config, self.vocab, seed=0, dtype=self.dtype)
        other.load_state_dict(self.state_dict())
        return other

    # -- transformer pieces ----------------------------------------------------

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}/g"], self.params[f"{prefix}/b"])

    def _linear(self, prefix_w: str, prefix_b: str, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.params[prefix_w]), self.params[prefix_b])

    def _mha(self, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None) -> Tensor:
        c = self.config
        B, Lq, h = q_in.shape
        Lk = kv_in.shape[1]
        H, D = c.n_heads, c.d_model // c.n_heads

        def heads(t: Tensor, L: int) -> Tensor:
            return T.transpose(T.reshape(t, (B, L, H, D)), (0, 2, 1, 3))

        q = heads(self._linear(f"{prefix}/wq", f"{prefix}/bq", q_in), Lq)
        k = heads(self._linear(f"{prefix}/wk", f"{prefix}/bk", kv_in), Lk)
        v = heads(self._linear(f"{prefix}/wv", f"{prefix}/bv", kv_in), Lk)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(D))
        if mask is not None:
            scores = T.masked_fill(scores, mask, -np.inf)
        probs = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, Lq, h))
        return self._linear(f"{prefix}/wo", f"{prefix}/bo", ctx)

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        inner = T.gelu(self._linear(f"{prefix}/w1", f"{prefix}/b1", x))
        return self._linear(f"{prefix}/w2", f"{prefix}/b2", inner)

    def encoder_forward(self, enc_ids: np.ndarray, enc_len: np.ndarray,
                        train: bool = False, rng=None) -> Tensor:
        """Run the encoder stack over padded id rows; returns (B, Ls, h) memory."""
        Ls = enc_ids.shape[1]
        pos = T.slice_(self.params["emb/enc_pos"], (slice(0, Ls),))
        x = T.add(T.embedding_gather(self.params["emb/tok"], enc_ids), pos)
        return self.encoder_layers(x, enc_len, train, rng)

    def encoder_layers(self, x: Tensor, enc_len: np.ndarray,
                       train: bool = False, rng=None) -> Tensor:
        """Encoder blocks plus final norm over already-embedded inputs."""
        B, Ls, _ = x.shape
        x = _dropout(x, self.config.dropout, train, rng)
        key_mask = (np.arange(Ls)[None, :] >= enc_len[:, None]).reshape(B, 1, 1, Ls)
        for i in range(self.config.n_encoder_layers):
            normed = self._ln(f"enc{i}/ln1", x)
            a = self._mha(f"enc{i}/attn", normed, normed, key_mask)
            x = T.add(x, _dropout(a, self.config.dropout, train, rng))
            f = self._ffn(f"enc{i}/ffn", self._ln(f"enc{i}/ln2", x))
            x = T.add(x, _dropout(f, self.config.dropout, train, rng))
        return self._ln("enc/ln_f", x)

    def decoder_forward(self, memory: Tensor, mem_len: np.ndarray, in_emb: Tensor,
                        prefix_len: np.ndarray, train: bool = False, rng=None
                        ) -> tuple[Tensor, Tensor]:
        """Causal decoder over embedded step inputs with cross-attention to memory.

        Returns (penultimate activations, final hidden states), both (B, T, h).
        The penultimate activation is the input to the last decoder layer; the
        pointer head and the sequence reranker read it.
        """
        B, Tn, h = in_emb.shape
        Lm = memory.shape[1]
        pos = T.slice_(self.params["emb/dec_pos"], (slice(0, Tn),))
        x = T.add(in_emb, pos)
        x = _dropout(x, self.config.dropout, train, rng)
        causal = np.triu(np.ones((Tn, Tn), dtype=bool), k=1).reshape(1, 1, Tn, Tn)
        pad_cols = (np.arange(Tn)[None, :] >= prefix_len[:, None]).reshape(B, 1, 1, Tn)
        self_mask = causal | pad_cols
        cross_mask = (np.arange(Lm)[None, :] >= mem_len[:, None]).reshape(B, 1, 1, Lm)
        penult = x
        n = self.config.n_decoder_layers
        for i in range(n):
            if i == n - 1:
                penult = x
            normed = self._ln(f"dec{i}/ln1", x)
            a = self._mha(f"dec{i}/self", normed, normed, self_mask)
            x = T.add(x, _dropout(a, self.config.dropout, train, rng))
            cr = self._mha(f"dec{i}/cross", self._ln(f"dec{i}/ln2", x), memory, cross_mask)
            x = T.add(x, _dropout(cr, self.config.dropout, train, rng))
            f = self._ffn(f"dec{i}/ffn", self._ln(f"dec{i}/ln3", x))
            x = T.add(x, _dropout(f, self.config.dropout, train, rng))
        return penult, self._ln("dec/ln_f", x)

    def wa_logits(self, hidden: Tensor) -> Tensor:
        return self._linear("out/w", "out/b", hidden)

    def pointer_latent(self, penult: Tensor) -> Tensor:
        """The feed-forward pointer head mapping penultimate activations to v."""
        return self._linear("ptr/w", "ptr/b", penult)

    # -- spec-level single-example operations ---------------------------------

    def encode(self, x_ids: list[int]) -> Tensor:
        """Memory for one buggy sequence: (len(x)+1, h), one row per location.

        The input is extended with a terminal boundary token so the pointer
        softmax over locations 0..L has a genuine key for location L.
        """
        L = len(x_ids)
        if L > self.config.max_len:
            raise InputError(f"input length {L} exceeds max_len {self.config.max_len}")
        ids = np.array([list(x_ids) + [self.vocab.eos_id]], dtype=np.int64)
        mem = self.encoder_forward(ids, np.array([L + 1]), train=False)
        return T.reshape(mem, (L + 1, self.config.d_model))

    def decode_step(self, memory: Tensor | np.ndarray, prefix: list[EditToken]
                    ) -> tuple[np.ndarray, np.ndarray]:
        """Teacher-forced pass over an edit-token prefix for one example.

        Returns (penultimate activations, word/action logits), each with one
        row per prefix position. Location inputs are embedded by slicing
        ``memory``; the prefix must already respect the FSM.
        """
        mem = memory if isinstance(memory, Tensor) else Tensor(np.asarray(memory, dtype=self.dtype))
        if mem.ndim != 2 or mem.shape[0] == 0:
            raise InputError(f"memory must be (L+1, h) with L >= 0, got {mem.shape}")
        if not prefix:
            raise InputError("empty decoder prefix")
        if len(prefix) > self.config.max_len:
            raise InputError(f"prefix length {len(prefix)} exceeds max_len {self.config.max_len}")
        L_plus_1 = mem.shape[0]
        Tn = len(prefix)
        word_ids = np.zeros((1, Tn), dtype=np.int64)
        loc_ids = np.zeros((1, Tn), dtype=np.int64)
        is_word = np.zeros((1, Tn, 1), dtype=self.dtype)
        for t, tok in enumerate(prefix):
            if tok.kind is TokenKind.LOC:
                if tok.value >= L_plus_1:
                    raise InputError(f"location {tok.value} has no memory row (L = {L_plus_1 - 1})")
                loc_ids[0, t] = tok.value
            else:
                word_ids[0, t] = self._token_embedding_id(tok)
                is_word[0, t, 0] = 1.0
        mem_b = T.reshape(mem, (1,) + mem.shape)
        in_emb = self._mixed_embedding(mem_b, word_ids, loc_ids, is_word)
        penult, hidden = self.decoder_forward(
            mem_b, np.array([L_plus_1]), in_emb, np.array([Tn]), train=False
        )
        logits = self.wa_logits(hidden)
        return penult.data[0], logits.data[0]

    def _token_embedding_id(self, tok: EditToken) -> int:
        v = self.vocab
        if tok.kind is TokenKind.BOS:
            return v.bos_id
        if tok.kind is TokenKind.EOS:
            return v.eos_id
        if tok.kind is TokenKind.DELETE:
            return v.delete_id
        if tok.kind is TokenKind.INSERT:
            return v.insert_id
        if tok.kind is TokenKind.WORD:
            if not v.is_word_id(tok.value):
                raise TrainingDataError(f"word id {tok.value} is not in the vocabulary")
            return tok.value
        raise TrainingDataError(f"token kind {tok.kind} has no embedding id")

    def _mixed_embedding(self, memory_b: Tensor, word_ids: np.ndarray,
                         loc_ids: np.ndarray, is_word: np.ndarray) -> Tensor:
        """Blend word-table rows and sliced memory rows into decoder inputs."""
        B, Lm = memory_b.shape[0], memory_b.shape[1]
        mem_flat = T.reshape(memory_b, (B * Lm, memory_b.shape[2]))
        flat_loc = loc_ids + (np.arange(B, dtype=np.int64) * Lm)[:, None]
        wemb = T.embedding_gather(self.params["emb/tok"], word_ids)
        lemb = T.embedding_gather(mem_flat, flat_loc)
        return T.add(T.scale(wemb, is_word), T.scale(lemb, 1.0 - is_word))

    def word_action_distribution(self, logits: np.ndarray) -> np.ndarray:
        """Softmax over the word/action space, stable under large logits."""
        logits = np.asarray(logits, dtype=np.float64).reshape(-1)
        if logits.shape[0] != self.config.vocab_size:
            raise ShapeError(f"logits length {logits.shape[0]} != |W| {self.config.vocab_size}")
        if np.isnan(logits).any():
            raise NumericError("NaN in word/action logits")
        m = logits.max()
        e = np.exp(logits - m)
        return e / e.sum()

    def location_distribution(self, v: np.ndarray, memory: Tensor | np.ndarray) -> np.ndarray:
        """Pointer distribution over locations 0..L from dot products v . m[j]."""
        mem = memory.data if isinstance(memory, Tensor) else np.asarray(memory)
        v = np.asarray(v).reshape(-1)
        if mem.ndim != 2 or mem.shape[0] == 0:
            raise InputError(f"memory must be (L+1, h), got {mem.shape}")
        if v.shape[0] != mem.shape[1]:
            raise ShapeError(f"latent length {v.shape[0]} != memory width {mem.shape[1]}")
        scores = (mem @ v).astype(np.float64)
        m = scores.max()
        e = np.exp(scores - m)
        return e / e.sum()

    # -- teacher-forced loss ---------------------------------------------------

    def teacher_forced_loss(self, x_ids: list[int], edit_tokens: list[EditToken]) -> Tensor:
        """Scalar loss for one example: mean word/action CE plus mean location CE."""
        batch = prepare_batch([(list(x_ids), edit_tokens)], self)
        loss, _ = self.loss_batch(batch, train=False, rng=None)
        return loss

    def loss_batch(self, batch: "PreparedBatch", train: bool, rng) -> tuple[Tensor, dict]:
        memory = self.encoder_forward(batch.enc_ids, batch.enc_len, train, rng)
        in_emb = self._mixed_embedding(memory, batch.in_word_ids, batch.in_loc_ids, batch.in_is_word)
        penult, hidden = self.decoder_forward(
            memory, batch.enc_len, in_emb, batch.prefix_len, train, rng
        )
        B, Tn = batch.in_word_ids.shape
        V = self.config.vocab_size
        Lm = memory.shape[1]

        logits = T.reshape(self.wa_logits(hidden), (B * Tn, V))
        wa_ce = T.cross_entropy(logits, batch.wa_targets.reshape(-1))
        n_wa = float(batch.wa_mask.sum())
        loss = T.scale(T.sum_(T.scale(wa_ce, batch.wa_mask.reshape(-1))), 1.0 / max(n_wa, 1.0))

        n_loc = float(batch.loc_mask.sum())
        loc_ce_mean = 0.0
        if n_loc > 0:
            v = self.pointer_latent(penult)
            scores = T.matmul(v, T.transpose(memory, (0, 2, 1)))
            invalid = (np.arange(Lm)[None, :] >= batch.enc_len[:, None]).reshape(B, 1, Lm)
            scores = T.masked_fill(scores, invalid, -np.inf)
            loc_ce = T.cross_entropy(T.reshape(scores, (B * Tn, Lm)), batch.loc_targets.reshape(-1))
            loc_loss = T.scale(T.sum_(T.scale(loc_ce, batch.loc_mask.reshape(-1))), 1.0 / n_loc)
            loc_ce_mean = loc_loss.item()
            loss = T.add(loss, loc_loss)
        stats = {
            "wa_positions": int(n_wa),
            "loc_positions": int(n_loc),
            "wa_ce": loss.item() - loc_ce_mean,
            "loc_ce": loc_ce_mean,
        }
        return loss, stats


@dataclass
class PreparedBatch:
    """Padded arrays for one teacher-forcing step over a batch of examples."""

    enc_ids: np.ndarray      # (B, Ls) int64, x + boundary + padding
    enc_len: np.ndarray      # (B,) lengths including the boundary row
    in_word_ids: np.ndarray  # (B, T) embedding-table ids for non-location inputs
    in_loc_ids: np.ndarray   # (B, T) memory row per location input, else 0
    in_is_word: np.ndarray   # (B, T, 1) 1.0 where the input uses the word table
    prefix_len: np.ndarray   # (B,) true decoder prefix lengths
    wa_targets: np.ndarray   # (B, T) int64
    wa_mask: np.ndarray      # (B, T) 1.0 where the target is a word/action token
    loc_targets: np.ndarray  # (B, T) int64 location indices
    loc_mask: np.ndarray     # (B, T) 1.0 where the target is a location token


def prepare_batch(examples: list[tuple[list[int], list[EditToken]]],
                  model: RepairModel) -> PreparedBatch:
    """Validate examples against the FSM and pad them into batch arrays."""
    if not examples:
        raise InputError("empty batch")
    cfg = model.config
    vocab = model.vocab
    dtype = model.dtype
    B = len(examples)
    for x_ids, toks in examples:
        if len(x_ids) > cfg.max_len:
            raise TrainingDataError(f"buggy sequence length {len(x_ids)} exceeds {cfg.max_len}")
        if len(toks) < 2 or len(toks) - 1 > cfg.max_len:
            raise TrainingDataError(f"edit sequence length {len(toks)} outside 2..{cfg.max_len + 1}")
        state = FsmState.BOS
        for tok in toks:
            if tok.kind not in valid_token_kinds(state):
                raise TrainingDataError(f"edit sequence violates the grammar in state {state.name}")
            if tok.kind is TokenKind.LOC and tok.value > len(x_ids):
                raise TrainingDataError(f"location {tok.value} exceeds sequence length {len(x_ids)}")
            state = fsm_next(state, tok)
        if state is not FsmState.EOS:
            raise TrainingDataError("edit sequence does not end in EOS")

    Ls = max(len(x) for x, _ in examples) + 1
    Tn = max(len(t) for _, t in examples) - 1
    enc_ids = np.full((B, Ls), vocab.pad_id, dtype=np.int64)
    enc_len = np.zeros(B, dtype=np.int64)
    in_word_ids = np.full((B, Tn), vocab.pad_id, dtype=np.int64)
    in_loc_ids = np.zeros((B, Tn), dtype=np.int64)
    in_is_word = np.zeros((B, Tn, 1), dtype=dtype)
    prefix_len = np.zeros(B, dtype=np.int64)
    wa_targets = np.zeros((B, Tn), dtype=np.int64)
    wa_mask = np.zeros((B, Tn), dtype=dtype)
    loc_targets = np.zeros((B, Tn), dtype=np.int64)
    loc_mask = np.zeros((B, Tn), dtype=dtype)

    for b, (x_ids, toks) in enumerate(examples):
        enc_ids[b, : len(x_ids)] = x_ids
        enc_ids[b, len(x_ids)] = vocab.eos_id
        enc_len[b] = len(x_ids) + 1
        inputs, targets = toks[:-1], toks[1:]
        prefix_len[b] = len(inputs)
        for t, tok in enumerate(inputs):
            if tok.kind is TokenKind.LOC:
                in_loc_ids[b, t] = tok.value
            else:
                in_word_ids[b, t] = model._token_embedding_id(tok)
                in_is_word[b, t, 0] = 1.0
        for t, tok in enumerate(targets):
            if tok.kind is TokenKind.LOC:
                loc_targets[b, t] = tok.value
                loc_mask[b, t] = 1.0
            else:
                wa_targets[b, t] = model._token_embedding_id(tok)
                wa_mask[b, t] = 1.0

    return PreparedBatch(
        enc_ids=enc_ids, enc_len=enc_len,
        in_word_ids=in_word_ids, in_loc_ids=in_loc_ids, in_is_word=in_is_word,
        prefix_len=prefix_len,
        wa_targets=wa_targets, wa_mask=wa_mask,
        loc_targets=loc_targets, loc_mask=loc_mask,
    )


def save_model_config(path, config: ModelConfig, extra: dict | None = None) -> None:
    doc = {"model": config.to_dict()}
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
