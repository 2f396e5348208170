"""Teacher-forced training of the three-part loss, and checkpoint-driven
evaluation.

The loss is l_normal + l_reverse + l_context: cross-entropy on each branch
plus a mean-squared context term between the normal branch's rows and the
target-aligned flip of the reverse branch's rows. Event step i of the
normal branch and event step k-1-i of the reverse branch predict the same
target, and the end-token step pairs with itself; PAD steps are excluded
everywhere.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from . import tensor as T
from .checkpoint import save_checkpoint
from .data import N_CONTROL, PAD_ID, LabeledClip, Vocab, encode_labels, split_dataset
from .inference import decode
from .model import ModelConfig, features_for_encoder, gct_forward, init_params
from .optim import SgdMomentum
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries epoch/step context."""


@dataclass
class LossBreakdown:
    l_normal: float
    l_reverse: float
    l_context: float
    total: float

    @classmethod
    def zero(cls) -> "LossBreakdown":
        return cls(0.0, 0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "l_normal": self.l_normal,
            "l_reverse": self.l_reverse,
            "l_context": self.l_context,
            "total": self.total,
        }


def context_alignment(n_events: int) -> np.ndarray:
    """Reverse-branch row index predicting the same target as each normal row.

    Event rows flip (i <-> k-1-i); the end-token row pairs with itself.
    """
    return np.array(list(range(n_events - 1, -1, -1)) + [n_events], dtype=np.intp)


def compute_loss(p: Tensor, p_rev: Tensor, normal_tgt, reverse_tgt,
                 pad_id: int = PAD_ID, use_reverse: bool = True):
    """Returns (total_tensor, LossBreakdown) for one clip.

    With use_reverse=False (plain transformer objective) the reverse and
    context terms are exactly zero and only the normal branch is supervised.
    """
    normal_tgt = np.asarray(normal_tgt, dtype=np.intp)
    reverse_tgt = np.asarray(reverse_tgt, dtype=np.intp)
    if p.data.shape != p_rev.data.shape or normal_tgt.shape != reverse_tgt.shape:
        raise ValueError("normal and reverse branches must see matched shapes")
    l_normal = T.cross_entropy(p, normal_tgt, pad_id)
    if not use_reverse:
        bd = LossBreakdown(float(l_normal.data), 0.0, 0.0, float(l_normal.data))
        return l_normal, bd
    l_reverse = T.cross_entropy(p_rev, reverse_tgt, pad_id)
    n_live = int((normal_tgt != pad_id).sum())  # k events + end token
    align = context_alignment(n_live - 1)
    l_context = T.mse(T.narrow(p, 0, 0, n_live), T.gather_rows(p_rev, align))
    total = (l_normal + l_reverse) + l_context
    bd = LossBreakdown(
        l_normal=float(l_normal.data),
        l_reverse=float(l_reverse.data),
        l_context=float(l_context.data),
        total=(float(l_normal.data) + float(l_reverse.data)) + float(l_context.data),
    )
    return total, bd


@dataclass
class Hyperparams:
    lr: float = 1e-3
    momentum: float = 0.99
    batch_size: int = 64
    epochs: int = 500
    val_fraction: float = 0.2
    use_reverse: bool = True  # False = transformer-baseline mode

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "momentum": self.momentum, "batch_size": self.batch_size,
            "epochs": self.epochs, "val_fraction": self.val_fraction,
            "use_reverse": self.use_reverse,
        }


@dataclass
class EpochStats:
    train: LossBreakdown
    val: LossBreakdown | None


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    best_checkpoint: str
    best_val_total: float
    seed: int
    config: dict
    hyperparams: dict
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epochs": [
                {"train": e.train.to_dict(), "val": e.val.to_dict() if e.val else None}
                for e in self.epochs
            ],
            "best_checkpoint": self.best_checkpoint,
            "best_val_total": self.best_val_total if np.isfinite(self.best_val_total) else None,
            "seed": self.seed,
            "config": self.config,
            "hyperparams": self.hyperparams,
            "wall_seconds": self.wall_seconds,
        }


def _clip_loss(clip: LabeledClip, cfg: ModelConfig, params, hyper: Hyperparams,
               training: bool, rng):
    n_in, n_tgt, r_in, r_tgt = encode_labels(clip.label, len(clip.label) + 1)
    feats = features_for_encoder(clip.features, cfg)
    p, p_rev, _ = gct_forward(feats, n_in, r_in, cfg, params,
                              training=training, rng=rng)
    return compute_loss(p, p_rev, n_tgt, r_tgt, use_reverse=hyper.use_reverse)


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    n = len(parts)
    l_normal = sum(p.l_normal for p in parts) / n
    l_reverse = sum(p.l_reverse for p in parts) / n
    l_context = sum(p.l_context for p in parts) / n
    return LossBreakdown(l_normal, l_reverse, l_context,
                         (l_normal + l_reverse) + l_context)


def _dataset_loss(clips, cfg, params, hyper) -> LossBreakdown:
    parts = [_clip_loss(c, cfg, params, hyper, training=False, rng=None)[1] for c in clips]
    return _mean_breakdown(parts)


def train(clips: list[LabeledClip], vocab: Vocab, cfg: ModelConfig,
          hyper: Hyperparams, seed: int, out_dir) -> TrainReport:
    """Optimize on a seeded split of `clips`; checkpoint on best validation
    total loss (training loss when the validation split is empty)."""
    if not clips:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()

    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    optimizer = SgdMomentum(params, lr=hyper.lr, momentum=hyper.momentum)
    train_clips, val_clips = split_dataset(clips, hyper.val_fraction, rng)

    ckpt_path = out_dir / "checkpoint_best.ckpt"
    best_val = float("inf")
    epochs: list[EpochStats] = []
    curve_rows = []

    if hyper.epochs == 0:
        save_checkpoint(ckpt_path, params, cfg, vocab, {"epoch": 0, "seed": seed})
        best_val = float("nan")

    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train_clips))
        train_parts: list[LossBreakdown] = []
        for start in range(0, len(order), hyper.batch_size):
            batch_idx = order[start : start + hyper.batch_size]
            scale = 1.0 / batch_idx.size
            for step, idx in enumerate(batch_idx):
                total, bd = _clip_loss(train_clips[idx], cfg, params, hyper,
                                       training=True, rng=rng)
                if not np.isfinite(bd.total):
                    raise TrainingDiverged(
                        f"non-finite loss {bd.total} at epoch {epoch}, "
                        f"batch offset {start}, clip {step} ({train_clips[idx].path})"
                    )
                total.backward(seed=np.asarray(scale, dtype=total.data.dtype))
                train_parts.append(bd)
            optimizer.step()
        train_bd = _mean_breakdown(train_parts)

        val_bd = _dataset_loss(val_clips, cfg, params, hyper) if val_clips else None
        epochs.append(EpochStats(train=train_bd, val=val_bd))
        selection = val_bd.total if val_bd else train_bd.total
        if selection < best_val:
            best_val = selection
            save_checkpoint(ckpt_path, params, cfg, vocab,
                            {"epoch": epoch + 1, "seed": seed, "val_total": selection})
        val_cell = f"{val_bd.total:.10g}" if val_bd else ""
        curve_rows.append(
            f"{epoch + 1},{train_bd.l_normal:.10g},{train_bd.l_reverse:.10g},"
            f"{train_bd.l_context:.10g},{train_bd.total:.10g},{val_cell}"
        )

    (out_dir / "losses.csv").write_text(
        "epoch,l_normal,l_reverse,l_context,total,val_total\n" + "\n".join(curve_rows)
        + ("\n" if curve_rows else "")
    )
    report = TrainReport(
        epochs=epochs,
        best_checkpoint=str(ckpt_path),
        best_val_total=best_val,
        seed=seed,
        config=cfg.to_dict(),
        hyperparams=hyper.to_dict(),
        wall_seconds=time.monotonic() - t0,
    )
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def evaluate(params, cfg: ModelConfig, vocab: Vocab, clips: list[LabeledClip],
             mode: str = "fbi", alpha: float = 0.5, l_max: int | None = None,
             jobs: int = 1):
    """Decode every clip and score it: returns (bundle, decode results).

    The bundle uses the reporting field names f_score_percent / auc / bleu
    plus acc_percent. Decoding is read-only over the parameters, so clips
    may be decoded in parallel.
    """
    if not clips:
        raise ValueError("nothing to evaluate")

    def _one(clip: LabeledClip):
        return decode(clip.features, params, cfg, mode=mode, alpha=alpha, l_max=l_max)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one, clips))
    else:
        results = [_one(c) for c in clips]

    n_events = vocab.size - N_CONTROL
    evals = []
    for clip, res in zip(clips, results):
        pred = np.zeros(n_events, dtype=bool)
        for t in res.tokens:
            pred[t - N_CONTROL] = True
        ref = np.zeros(n_events, dtype=bool)
        for t in clip.label:
            ref[t - N_CONTROL] = True
        if res.step_probs.size:
            scores = res.step_probs[:, N_CONTROL:].max(axis=0)
        else:
            scores = np.zeros(n_events)
        evals.append(M.ClipEval(pred_present=pred, scores=scores, ref_present=ref,
                                pred_seq=list(res.tokens), ref_seq=list(clip.label)))

    try:
        auc = M.at_auc(evals)
    except ValueError:
        auc = float("nan")
    bundle = {
        "acc_percent": 100.0 * M.at_accuracy(evals),
        "f_score_percent": 100.0 * M.at_fscore(evals),
        "auc": auc,
        "bleu": M.bleu([e.pred_seq for e in evals], [e.ref_seq for e in evals]),
        "mode": mode,
        "alpha": alpha,
        "n_clips": len(clips),
    }
    return bundle, results
