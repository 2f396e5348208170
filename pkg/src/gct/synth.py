"""Deterministic synthetic clips with known sequential labels.

Clips are generated directly in the spectrogram domain: a noise floor plus
one rectangular energy burst per event in that class's mel band. Onsets are
strictly increasing, durations may overlap, and neighboring class bands
overlap partially so covered-event cases occur. A non-learned band-energy
onset detector recovers the label at low noise, which certifies the
learning task before any model touches it. A WAV-emitting mode synthesizes
band-limited tone bursts to exercise the full audio pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import frontend
from .data import write_manifest
from .frontend import LOG_ENERGY_FLOOR, N_MELS


@dataclass
class EventTemplate:
    name: str
    band: tuple[int, int]  # [lo, hi) mel bins; bands of distinct classes may overlap
    duration: int  # frames
    amplitude: float = 1.0
    onset_jitter: int = 0

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError(f"duration must be >= 1, got {self.duration}")
        lo, hi = self.band
        if not (0 <= lo < hi <= N_MELS):
            raise ValueError(f"band {self.band} outside [0, {N_MELS})")


def default_templates(n_classes: int, n_mels: int = N_MELS) -> list[EventTemplate]:
    """Evenly spaced bands, each overlapping its neighbor by a third."""
    if not 1 <= n_classes <= 30:
        raise ValueError(f"n_classes must be in [1, 30], got {n_classes}")
    step = n_mels // (n_classes + 1)
    width = max(2, (3 * step) // 2)
    templates = []
    for c in range(n_classes):
        lo = c * step
        hi = min(n_mels, lo + width)
        templates.append(EventTemplate(
            name=f"ev{c:02d}", band=(lo, hi), duration=8 + 2 * (c % 4), amplitude=1.0,
        ))
    return templates


def generate_clip(seq: list[str], templates: list[EventTemplate], total_frames: int,
                  noise_db: float, seed, min_gap: int = 0) -> tuple[np.ndarray, list[str]]:
    """One clip: (log-mel spectrogram, label = class names in onset order).

    noise_db is the noise power relative to unit event amplitude; -inf means
    silence between events. Onsets are strictly increasing (at least min_gap
    frames apart when given) and every event fits inside total_frames;
    events may still overlap in time through their durations.
    """
    rng = np.random.default_rng(seed)
    by_name = {t.name: t for t in templates}
    events = [by_name[name] for name in seq]
    max_dur = max((t.duration for t in events), default=1)
    usable = total_frames - max_dur
    k = len(events)
    span = usable - (k - 1) * min_gap if k else usable
    if k > max(span, 0):
        raise ValueError(
            f"{k} events cannot get distinct onsets in {total_frames} frames"
        )
    noise_power = 0.0 if noise_db == -math.inf else 10.0 ** (noise_db / 10.0)
    energy = noise_power * rng.uniform(0.5, 1.5, size=(total_frames, N_MELS))
    if events:
        onsets = np.sort(rng.choice(span, size=k, replace=False))
        onsets = onsets + min_gap * np.arange(k)
    else:
        onsets = []
    for onset, tpl in zip(onsets, events):
        if tpl.onset_jitter:
            onset = int(np.clip(onset + rng.integers(-tpl.onset_jitter, tpl.onset_jitter + 1),
                                0, usable - 1))
        lo, hi = tpl.band
        energy[onset : onset + tpl.duration, lo:hi] += tpl.amplitude
    return np.log(energy + LOG_ENERGY_FLOOR), list(seq)


def detect_onsets(spec: np.ndarray, templates: list[EventTemplate]) -> list[str]:
    """Band-energy onset oracle: no learning, just thresholding.

    Each class is detected on the bins exclusive to its band (overlap with
    other classes removed) at half its amplitude; detected classes are
    returned in onset order. Reliable for noise_db <= -20.
    """
    energy = np.exp(spec) - LOG_ENERGY_FLOOR
    hits = []
    for i, tpl in enumerate(templates):
        exclusive = np.ones(N_MELS, dtype=bool)
        exclusive[: tpl.band[0]] = False
        exclusive[tpl.band[1] :] = False
        for j, other in enumerate(templates):
            if j != i:
                exclusive[other.band[0] : other.band[1]] = False
        if not exclusive.any():
            raise ValueError(f"class {tpl.name} has no exclusive mel bins")
        band_energy = energy[:, exclusive].mean(axis=1)
        above = np.nonzero(band_energy > tpl.amplitude / 2.0)[0]
        if above.size:
            hits.append((int(above[0]), tpl.name))
    return [name for _, name in sorted(hits)]


def generate_dataset(n_clips: int, n_classes: int, max_events: int, seed: int, out_dir,
                     total_frames: int = 200, noise_db: float = -30.0,
                     min_events: int = 1, min_gap: int = 0, emit_wav: bool = False,
                     sample_rate: int = 16000) -> Path:
    """Write clip features plus a manifest; returns the manifest path.

    Classes are stratified so each appears at least max(3, n_clips // 10)
    times; within a clip classes are distinct so band-energy onset
    detection stays a valid oracle.
    """
    if n_classes > 30:
        raise ValueError(f"n_classes must be <= 30, got {n_classes}")
    if max_events > n_classes:
        raise ValueError("max_events cannot exceed n_classes (classes are distinct per clip)")
    out_dir = Path(out_dir)
    clip_dir = out_dir / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    templates = default_templates(n_classes)
    rng = np.random.default_rng(seed)

    lengths = rng.integers(min_events, max_events + 1, size=n_clips)
    required = max(3, n_clips // 10)
    sequences: list[list[str]] = [[] for _ in range(n_clips)]
    capacity = lengths.copy()
    # Deal each class into the `required` emptiest clips that can take it.
    for tpl in templates:
        eligible = [i for i in range(n_clips) if capacity[i] > 0]
        eligible.sort(key=lambda i: (-capacity[i], i))
        if len(eligible) < required:
            raise ValueError(
                f"cannot place {required} occurrences of class {tpl.name} "
                f"into {n_clips} clips of <= {max_events} events"
            )
        for i in eligible[:required]:
            sequences[i].append(tpl.name)
            capacity[i] -= 1
    names = [t.name for t in templates]
    for i in range(n_clips):
        extras = [n for n in names if n not in sequences[i]]
        rng.shuffle(extras)
        take = int(capacity[i])
        sequences[i].extend(extras[:take])
        rng.shuffle(sequences[i])

    entries = []
    for i, seq in enumerate(sequences):
        spec, label = generate_clip(seq, templates, total_frames, noise_db,
                                    seed=rng.integers(2**32), min_gap=min_gap)
        if emit_wav:
            rel = f"clips/clip_{i:04d}.wav"
            wav = _render_wav(seq, templates, total_frames, noise_db, sample_rate,
                              rng.integers(2**32))
            frontend.save_wav(out_dir / rel, wav)
        else:
            rel = f"clips/clip_{i:04d}.csv"
            frontend.save_spectrogram_csv(out_dir / rel, spec)
        entries.append((rel, label))
    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


def _render_wav(seq, templates, total_frames, noise_db, sample_rate,
                seed) -> frontend.Waveform:
    """Tone bursts inside each class band, for end-to-end pipeline tests."""
    rng = np.random.default_rng(seed)
    hop = int(round(sample_rate * frontend.HOP_MS / 1000.0))
    win = int(round(sample_rate * frontend.WINDOW_MS / 1000.0))
    n_samples = (total_frames - 1) * hop + win
    centers = frontend.mel_filter_centers(sample_rate)
    t = np.arange(n_samples) / sample_rate
    signal = np.zeros(n_samples)
    if noise_db != -math.inf:
        signal += 10.0 ** (noise_db / 20.0) * rng.standard_normal(n_samples) * 0.05
    by_name = {tpl.name: tpl for tpl in templates}
    max_dur = max((by_name[s].duration for s in seq), default=1)
    usable = max(total_frames - max_dur, 1)
    onsets = np.sort(rng.choice(usable, size=len(seq), replace=False))
    for onset, name in zip(onsets, seq):
        tpl = by_name[name]
        lo, hi = tpl.band
        freqs = centers[lo:hi:4]
        start = onset * hop
        stop = min(start + tpl.duration * hop + win, n_samples)
        seg = t[start:stop]
        burst = sum(np.sin(2 * np.pi * f * seg + rng.uniform(0, 2 * np.pi)) for f in freqs)
        signal[start:stop] += 0.1 * burst / max(len(freqs), 1)
    peak = np.abs(signal).max()
    if peak > 0.99:
        signal *= 0.99 / peak
    return frontend.Waveform(samples=signal, sample_rate=sample_rate)
