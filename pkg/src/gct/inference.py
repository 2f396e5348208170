"""Greedy decoding and forward-backward inference.

Decoding is argmax-only and deterministic; ties break toward the lowest
token id. Forward-backward inference runs the encoder twice (original and
time-reversed features), steps both decoder branches in lockstep, and
fuses their per-step probabilities as alpha*p + (1-alpha)*p_reverse. The
fused token is appended to both histories; the decoder output is
recomputed from the full history every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import frontend
from .data import BOS_ID, BOS_REV_ID, EOS_ID, N_CONTROL, Vocab
from .model import (
    ModelConfig,
    decoder_forward,
    embed_input,
    encoder_forward,
    features_for_encoder,
    head_forward,
)


@dataclass
class DecodeResult:
    """Decoded events plus everything needed to inspect the decision path.

    `tokens` holds event ids only (control tokens stripped). `step_probs`
    holds the fused per-step probability rows that drove token selection;
    the per-branch rows are kept alongside. Attention arrays are stacked
    per-step cross-attention rows, shaped (blocks, heads, steps, T_enc).
    """

    tokens: list[int]
    step_probs: np.ndarray  # (steps, V)
    normal_probs: np.ndarray | None
    reverse_probs: np.ndarray | None
    alpha: float
    truncated: bool
    cross_attention: dict[str, np.ndarray] = field(default_factory=dict)
    self_attention: dict[str, np.ndarray] = field(default_factory=dict)
    emitted: list[int] = field(default_factory=list)  # raw per-step argmax ids


def _argmax(row: np.ndarray) -> int:
    # np.argmax returns the first maximum: lowest token id on ties.
    return int(np.argmax(row))


def _last_row_probs(enc_out, history, params, cfg, branch, collect):
    dec_out, records = decoder_forward(
        enc_out, history, params, cfg, branch=branch, collect_attention=collect
    )
    probs = head_forward(dec_out, params, cfg)
    row = probs.data[-1]
    cross = None
    self_rows = None
    if collect:
        cross = np.stack([rec.cross_attn[0][:, -1, :] for rec in records])  # (blocks, heads, T)
        self_rows = records
    return row, cross, self_rows


def _stack_steps(step_list: list[np.ndarray]) -> np.ndarray:
    # list of (blocks, heads, T) -> (blocks, heads, steps, T)
    return np.stack(step_list, axis=2)


def greedy_decode(features: np.ndarray, params, cfg: ModelConfig, branch: str = "normal",
                  l_max: int | None = None, collect_attention: bool = True) -> DecodeResult:
    """Single-branch greedy decoding.

    The normal branch reads the features as-is starting from <s>; the
    reverse branch reads time-reversed features starting from <s'>, which
    makes its outputs forward-order predictions of the original clip.
    """
    if branch not in ("normal", "reverse"):
        raise ValueError(f"branch must be 'normal' or 'reverse', got {branch!r}")
    if l_max is None:
        l_max = cfg.max_len
    spec = features if branch == "normal" else frontend.reverse_time(features)
    enc_out = encoder_forward(embed_input(features_for_encoder(spec, cfg), cfg, params),
                              params, cfg)
    history = [BOS_ID if branch == "normal" else BOS_REV_ID]
    steps: list[np.ndarray] = []
    cross_steps: list[np.ndarray] = []
    emitted: list[int] = []
    truncated = True
    for _ in range(l_max - 1):
        row, cross, _ = _last_row_probs(enc_out, history, params, cfg, branch,
                                        collect_attention)
        steps.append(row)
        if collect_attention:
            cross_steps.append(cross)
        token = _argmax(row)
        emitted.append(token)
        if token == EOS_ID:
            truncated = False
            break
        history.append(token)
    result = DecodeResult(
        tokens=[t for t in emitted if t >= N_CONTROL],
        step_probs=np.array(steps),
        normal_probs=np.array(steps) if branch == "normal" else None,
        reverse_probs=np.array(steps) if branch == "reverse" else None,
        alpha=1.0 if branch == "normal" else 0.0,
        truncated=truncated,
        emitted=emitted,
    )
    if collect_attention and cross_steps:
        result.cross_attention[branch] = _stack_steps(cross_steps)
    return result


def fbi_decode(features: np.ndarray, params, cfg: ModelConfig, alpha: float = 0.5,
               l_max: int | None = None, collect_attention: bool = True) -> DecodeResult:
    """Fused decoding over the normal branch and the reverse branch on
    time-reversed features; both histories receive every fused token."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if l_max is None:
        l_max = cfg.max_len
    emb_fwd = embed_input(features_for_encoder(features, cfg), cfg, params)
    emb_rev = embed_input(features_for_encoder(frontend.reverse_time(features), cfg),
                          cfg, params)
    enc_fwd = encoder_forward(emb_fwd, params, cfg)
    enc_rev = encoder_forward(emb_rev, params, cfg)

    history = [BOS_ID]
    history_rev = [BOS_REV_ID]
    fused_steps: list[np.ndarray] = []
    normal_steps: list[np.ndarray] = []
    reverse_steps: list[np.ndarray] = []
    cross_fwd: list[np.ndarray] = []
    cross_rev: list[np.ndarray] = []
    emitted: list[int] = []
    truncated = True
    for _ in range(l_max - 1):
        p, cf, _ = _last_row_probs(enc_fwd, history, params, cfg, "normal",
                                   collect_attention)
        p_rev, cr, _ = _last_row_probs(enc_rev, history_rev, params, cfg, "reverse",
                                       collect_attention)
        fused = alpha * p + (1.0 - alpha) * p_rev
        fused_steps.append(fused)
        normal_steps.append(p)
        reverse_steps.append(p_rev)
        if collect_attention:
            cross_fwd.append(cf)
            cross_rev.append(cr)
        token = _argmax(fused)
        emitted.append(token)
        if token == EOS_ID:
            truncated = False
            break
        history.append(token)
        history_rev.append(token)
    result = DecodeResult(
        tokens=[t for t in emitted if t >= N_CONTROL],
        step_probs=np.array(fused_steps),
        normal_probs=np.array(normal_steps),
        reverse_probs=np.array(reverse_steps),
        alpha=alpha,
        truncated=truncated,
        emitted=emitted,
    )
    if collect_attention and cross_fwd:
        result.cross_attention["normal"] = _stack_steps(cross_fwd)
        result.cross_attention["reverse"] = _stack_steps(cross_rev)
    return result


def decode(features: np.ndarray, params, cfg: ModelConfig, mode: str = "fbi",
           alpha: float = 0.5, l_max: int | None = None,
           collect_attention: bool = False) -> DecodeResult:
    if mode == "fbi":
        return fbi_decode(features, params, cfg, alpha, l_max, collect_attention)
    if mode in ("normal", "reverse"):
        return greedy_decode(features, params, cfg, mode, l_max, collect_attention)
    raise ValueError(f"mode must be fbi, normal or reverse, got {mode!r}")


def dump_attention(result: DecodeResult, vocab: Vocab, out_dir) -> list[str]:
    """Write one CSV per (branch, block, head) of cross-attention.

    Rows are decode steps labeled by the token predicted at that step;
    columns are encoder positions.
    """
    if not result.cross_attention:
        raise ValueError("decode result carries no attention records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [vocab.name(t) for t in result.emitted]
    written = []
    for branch, stack in result.cross_attention.items():
        n_blocks, n_heads, n_steps, _ = stack.shape
        for b in range(n_blocks):
            for h in range(n_heads):
                path = out_dir / f"{branch}_block{b}_head{h}.csv"
                with open(path, "w") as fh:
                    for s in range(n_steps):
                        row = ",".join(f"{x:.10e}" for x in stack[b, h, s])
                        fh.write(f"{labels[s]},{row}\n")
                written.append(str(path))
    return written
