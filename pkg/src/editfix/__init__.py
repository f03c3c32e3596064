"""editfix: token-level code repair via edit-script prediction.

Pipeline: a byte-level BPE tokenizer turns (buggy, fixed) pairs into token
sequences; a recursive longest-block diff derives ground-truth edit programs;
an encoder-decoder with a pointer head learns to emit them; FSM-masked beam
search generates candidates; two reranking heads and a linear ensemble pick
the final order.
"""

from . import _kernels
from .bpe import Vocab, decode, encode, train_bpe
from .beam import Hypothesis, beam_search, beam_search_batch, hypothesis_to_fixed_code
from .diffing import (
    EditStats,
    apply_edits,
    apply_edits_ascending,
    derive_edits,
    edit_stats,
    longest_matching_block,
)
from .grammar import (
    Delete,
    EditProgram,
    EditToken,
    FsmState,
    Insert,
    TokenKind,
    fsm_next,
    parse,
    serialize,
    valid_token_kinds,
)
from .model import ModelConfig, RepairModel
from .pipeline import PipelineConfig, run_pipeline
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "Vocab", "train_bpe", "encode", "decode",
    "EditToken", "TokenKind", "FsmState", "EditProgram", "Delete", "Insert",
    "fsm_next", "valid_token_kinds", "serialize", "parse",
    "longest_matching_block", "derive_edits", "apply_edits",
    "apply_edits_ascending", "edit_stats", "EditStats",
    "Tensor", "Parameter", "backward", "no_grad",
    "ModelConfig", "RepairModel",
    "Hypothesis", "beam_search", "beam_search_batch", "hypothesis_to_fixed_code",
    "PipelineConfig", "run_pipeline",
    "_kernels",
]
