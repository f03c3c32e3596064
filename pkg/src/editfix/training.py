"""Teacher-forced training with a triangular schedule and early stopping.

Epoch randomness (shuffling, dropout) derives from ``default_rng([seed,
epoch])``, so resuming from a checkpoint at epoch k replays exactly the run
that never stopped. Early stopping watches greedy-decode exact match on the
validation set and keeps the best parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .beam import PredictionError, beam_search_batch, hypothesis_to_fixed_code
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Example
from .model import RepairModel, prepare_batch
from .grammar import ids_to_tokens
from .optim import AdamW, triangular_lr
from .tensor import NumericError, backward, no_grad


@dataclass
class TrainSettings:
    epochs: int = 60
    batch_size: int = 32
    peak_lr: float = 1e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    patience: int = 5
    seed: int = 0
    decode_max_len: int = 48
    decode_alpha: float = 0.6

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        return cls(**d)


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_em: float = -1.0
    epochs_run: int = 0
    stopped_early: bool = False
    diverged: bool = False


def greedy_exact_match(model: RepairModel, examples: list[Example], *,
                       max_len: int = 48, alpha: float = 0.6,
                       batch_size: int = 64) -> float:
    """Top-1 exact match of greedy decoding (beam width 1) against gold code."""
    if not examples:
        return 0.0
    hyp_lists = beam_search_batch(
        model, [e.x_ids for e in examples], K=1, max_len=max_len, alpha=alpha,
        batch_size=batch_size,
    )
    hits = 0
    for ex, hyps in zip(examples, hyp_lists):
        if not hyps:
            continue
        try:
            applied = hypothesis_to_fixed_code(ex.x_ids, hyps[0])
        except PredictionError:
            continue
        if applied == ex.y_ids:
            hits += 1
    return hits / len(examples)


def train_model(model: RepairModel, train_examples: list[Example],
                valid_examples: list[Example], settings: TrainSettings,
                state_path=None, resume: bool = False,
                stop_after_epochs: int | None = None) -> TrainResult:
    """Mini-batch AdamW training; returns the best-by-validation parameters.

    With ``state_path`` set, a resumable training state is written after every
    epoch; ``resume=True`` continues from it bit-exactly (same seed). The
    schedule always spans ``settings.epochs``; ``stop_after_epochs`` only caps
    how many epochs this invocation runs (for budgeted or sharded runs).
    """
    if not train_examples:
        raise ValueError("empty training set")
    opt = AdamW(model.parameters(), lr=settings.peak_lr,
                weight_decay=settings.weight_decay)
    n = len(train_examples)
    steps_per_epoch = (n + settings.batch_size - 1) // settings.batch_size
    total_steps = max(1, settings.epochs * steps_per_epoch)

    start_epoch = 0
    best_state = model.state_dict()
    best_em = -1.0
    best_epoch = -1
    bad_epochs = 0
    history: list[dict] = []

    if resume and state_path is not None:
        arrays, manifest = load_checkpoint(state_path)
        model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
        opt.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("opt/")})
        best_state = {k[5:]: v for k, v in arrays.items() if k.startswith("best/")}
        start_epoch = manifest["epoch_completed"]
        best_em = manifest["best_val_em"]
        best_epoch = manifest["best_epoch"]
        bad_epochs = manifest["bad_epochs"]
        history = manifest["history"]

    end_epoch = settings.epochs
    if stop_after_epochs is not None:
        end_epoch = min(end_epoch, stop_after_epochs)
    examples = list(train_examples)
    diverged = False
    epoch = start_epoch
    for epoch in range(start_epoch, end_epoch):
        rng = np.random.default_rng([settings.seed, epoch])
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for i in range(steps_per_epoch):
            batch_idx = perm[i * settings.batch_size : (i + 1) * settings.batch_size]
            if batch_idx.size == 0:
                continue
            batch = prepare_batch(
                [(examples[int(j)].x_ids, ids_to_tokens(examples[int(j)].edit_ids, model.vocab))
                 for j in batch_idx],
                model,
            )
            try:
                loss, _ = model.loss_batch(batch, train=True, rng=rng)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    diverged = True
                    break
                backward(loss)
                step = epoch * steps_per_epoch + i + 1
                opt.step(lr=triangular_lr(step, total_steps, settings.peak_lr,
                                          settings.warmup_frac))
            except NumericError:
                diverged = True
                break
            opt.zero_grad()
            epoch_loss += loss_val * batch_idx.size
        if diverged:
            break
        val_em = greedy_exact_match(
            model, valid_examples, max_len=settings.decode_max_len,
            alpha=settings.decode_alpha,
        )
        history.append({"epoch": epoch, "train_loss": epoch_loss / n, "val_em": val_em})
        if val_em > best_em:
            best_em = val_em
            best_epoch = epoch
            best_state = model.state_dict()
            bad_epochs = 0
        else:
            bad_epochs += 1
        if state_path is not None:
            _save_training_state(state_path, model, opt, best_state, epoch + 1,
                                 best_em, best_epoch, bad_epochs, history)
        if bad_epochs >= settings.patience:
            return TrainResult(
                best_state=best_state, final_state=model.state_dict(),
                history=history, best_epoch=best_epoch, best_val_em=best_em,
                epochs_run=epoch + 1, stopped_early=True,
            )
    if diverged:
        # Abort with the last good checkpoint.
        model.load_state_dict(best_state)
        return TrainResult(
            best_state=best_state, final_state=best_state, history=history,
            best_epoch=best_epoch, best_val_em=best_em, epochs_run=epoch,
            diverged=True,
        )
    return TrainResult(
        best_state=best_state, final_state=model.state_dict(), history=history,
        best_epoch=best_epoch, best_val_em=best_em, epochs_run=end_epoch,
    )


def _save_training_state(path, model, opt, best_state, epoch_completed,
                         best_em, best_epoch, bad_epochs, history) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, v in model.state_dict().items():
        arrays[f"model/{k}"] = v
    for k, v in opt.state_arrays().items():
        arrays[f"opt/{k}"] = v
    for k, v in best_state.items():
        arrays[f"best/{k}"] = v
    manifest = {
        "kind": "training_state",
        "config": model.config.to_dict(),
        "epoch_completed": epoch_completed,
        "best_val_em": best_em,
        "best_epoch": best_epoch,
        "bad_epochs": bad_epochs,
        "history": history,
    }
    save_checkpoint(path, arrays, manifest)
