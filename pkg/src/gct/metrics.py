"""Clip-level tagging metrics and the corpus sequence metric.

Presence is set membership of a class token in the decoded sequence; the
per-class score is the maximum probability the decoder assigned to that
class over its steps. Accuracy is cell-wise over (clip, class) pairs,
F-score is micro-averaged, AUC is the rank statistic macro-averaged over
classes, and BLEU is corpus-level with brevity penalty.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np


@dataclass
class ClipEval:
    pred_present: np.ndarray  # (C,) bool
    scores: np.ndarray  # (C,) float
    ref_present: np.ndarray  # (C,) bool
    pred_seq: list[int]
    ref_seq: list[int]


def at_accuracy(evals: list[ClipEval]) -> float:
    """Fraction of (clip, class) cells where predicted presence matches."""
    if not evals:
        raise ValueError("no evaluations")
    pred = np.stack([e.pred_present for e in evals])
    ref = np.stack([e.ref_present for e in evals])
    return float((pred == ref).mean())


def at_fscore(evals: list[ClipEval]) -> float:
    """Micro-averaged F1 over all (clip, class) cells; 0 when P + R = 0."""
    if not evals:
        raise ValueError("no evaluations")
    pred = np.stack([e.pred_present for e in evals])
    ref = np.stack([e.ref_present for e in evals])
    tp = float((pred & ref).sum())
    fp = float((pred & ~ref).sum())
    fn = float((~pred & ref).sum())
    if tp == 0.0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def _rank_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """P(random positive outranks random negative), ties counting one half."""
    pos = scores[positive]
    neg = scores[~positive]
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    # Average ranks over ties so the statistic is exchange-invariant.
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[positive].sum()
    n_pos, n_neg = pos.size, neg.size
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def at_auc(evals: list[ClipEval]) -> float:
    """Macro-averaged ROC-AUC; classes lacking a positive or negative are
    skipped, and if every class is skipped the value is undefined."""
    if not evals:
        raise ValueError("no evaluations")
    scores = np.stack([e.scores for e in evals])
    ref = np.stack([e.ref_present for e in evals])
    per_class = []
    for c in range(scores.shape[1]):
        pos = ref[:, c]
        if pos.all() or not pos.any():
            continue
        per_class.append(_rank_auc(scores[:, c], pos))
    if not per_class:
        raise ValueError("AUC undefined: every class lacks positives or negatives")
    return float(np.mean(per_class))


def _ngrams(seq: list[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(candidates: list[list[int]], references: list[list[int]], max_n: int = 4) -> float:
    """Corpus BLEU with brevity penalty.

    Orders run up to min(max_n, longest candidate); an included order with
    zero matches falls back to add-one smoothing on both numerator and
    denominator. No unigram match anywhere floors the score at 0.
    """
    if not references or len(candidates) != len(references):
        raise ValueError("need equally many candidates and references, at least one each")
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 1.0 if ref_len == 0 else 0.0

    usable = min(max_n, max(len(c) for c in candidates))
    log_sum = 0.0
    for n in range(1, usable + 1):
        matched = 0
        total = 0
        for cand, ref in zip(candidates, references):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            total += sum(cand_counts.values())
            matched += sum(min(count, ref_counts[g]) for g, count in cand_counts.items())
        if n == 1 and matched == 0:
            return 0.0
        if matched == 0:
            matched, total = matched + 1, total + 1
        log_sum += np.log(matched / total)
    geo_mean = float(np.exp(log_sum / usable))

    bp = 1.0 if cand_len >= ref_len else float(np.exp(1.0 - ref_len / cand_len))
    return bp * geo_mean
