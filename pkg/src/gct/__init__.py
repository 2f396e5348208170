"""Gated contextual transformer for sequential audio tagging.

A self-contained, numpy-backed implementation: log-mel frontend, encoder
plus shared-weight bidirectional decoder with a gated MLP head, the
three-part training loss, forward-backward decoding, tagging/sequence
metrics, and a synthetic-data oracle. See the `gct` CLI for the pipeline.
"""

__version__ = "0.1.0"

from .data import Vocab, LabeledClip, encode_labels, load_manifest, make_batches
from .inference import DecodeResult, dump_attention, fbi_decode, greedy_decode
from .metrics import ClipEval, at_accuracy, at_auc, at_fscore, bleu
from .model import ModelConfig, gct_forward, init_params, param_count
from .optim import SgdMomentum, finite_diff_check
from .tensor import Tensor
from .training import Hyperparams, LossBreakdown, TrainReport, compute_loss, evaluate, train

__all__ = [
    "__version__",
    "Vocab", "LabeledClip", "encode_labels", "load_manifest", "make_batches",
    "DecodeResult", "dump_attention", "fbi_decode", "greedy_decode",
    "ClipEval", "at_accuracy", "at_auc", "at_fscore", "bleu",
    "ModelConfig", "gct_forward", "init_params", "param_count",
    "SgdMomentum", "finite_diff_check",
    "Tensor",
    "Hyperparams", "LossBreakdown", "TrainReport", "compute_loss", "evaluate", "train",
]
