"""Vocabulary, sequential-label encoding, manifests and batching.

A sequential label is the ordered list of event classes by start boundary.
The decoder consumes two teacher-forcing layouts of it: the normal one
bracketed by <s>...<e> and the reversed one bracketed by <s'>...<e>.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import frontend

PAD_ID = 0
BOS_ID = 1  # <s>, start of the normal sequence
BOS_REV_ID = 2  # <s'>, start of the reverse sequence
EOS_ID = 3  # <e>
N_CONTROL = 4

CONTROL_NAMES = {PAD_ID: "<pad>", BOS_ID: "<s>", BOS_REV_ID: "<s'>", EOS_ID: "<e>"}
_RESERVED = set(CONTROL_NAMES.values())


class Vocab:
    """Bijection between event names and token ids 4..V-1; ids 0-3 are control."""

    def __init__(self, events):
        events = list(events)
        seen = set()
        for name in events:
            if name in _RESERVED:
                raise ValueError(f"event name {name!r} collides with a control token")
            if "," in name or "\t" in name or not name:
                raise ValueError(f"invalid event name {name!r}: no commas, tabs or empty names")
            if name in seen:
                raise ValueError(f"duplicate event name {name!r}")
            seen.add(name)
        self._events = events
        self._id_of = {name: N_CONTROL + i for i, name in enumerate(events)}

    @classmethod
    def from_names(cls, names) -> "Vocab":
        """Deterministic vocabulary: lexicographically sorted unique names."""
        return cls(sorted(set(names)))

    @property
    def events(self) -> list[str]:
        return list(self._events)

    @property
    def size(self) -> int:
        return N_CONTROL + len(self._events)

    def id(self, name: str) -> int:
        if name not in self._id_of:
            raise KeyError(f"unknown event {name!r}: not in the training vocabulary")
        return self._id_of[name]

    def name(self, token_id: int) -> str:
        if token_id in CONTROL_NAMES:
            return CONTROL_NAMES[token_id]
        idx = token_id - N_CONTROL
        if 0 <= idx < len(self._events):
            return self._events[idx]
        raise KeyError(f"unknown token id {token_id}")

    def is_event(self, token_id: int) -> bool:
        return N_CONTROL <= token_id < self.size

    def encode_names(self, names) -> list[int]:
        return [self.id(n) for n in names]

    def __eq__(self, other):
        return isinstance(other, Vocab) and other._events == self._events


def encode_labels(label: list[int], max_len: int):
    """Teacher-forcing layouts, each padded to max_len.

    Returns (normal_in, normal_tgt, reverse_in, reverse_tgt):
      normal_in  = [<s>,  e1 ... ek, PAD...]
      normal_tgt = [e1 ... ek, <e>,  PAD...]
      reverse_in = [<s'>, ek ... e1, PAD...]
      reverse_tgt= [ek ... e1, <e>,  PAD...]
    """
    k = len(label)
    if k + 1 > max_len:
        raise ValueError(f"label with {k} events needs {k + 1} positions but max_len is {max_len}")
    for t in label:
        if t < N_CONTROL:
            raise ValueError(f"control token id {t} inside a sequential label")
    pad = [PAD_ID] * (max_len - k - 1)
    fwd = list(label)
    rev = fwd[::-1]
    normal_in = [BOS_ID] + fwd + pad
    normal_tgt = fwd + [EOS_ID] + pad
    reverse_in = [BOS_REV_ID] + rev + pad
    reverse_tgt = rev + [EOS_ID] + pad
    return normal_in, normal_tgt, reverse_in, reverse_tgt


def strip_label(target: list[int]) -> list[int]:
    """Recover the event list from a padded target row (inverse of encode_labels)."""
    out = []
    for t in target:
        if t in (EOS_ID, PAD_ID):
            break
        out.append(t)
    return out


# -- manifests ----------------------------------------------------------------


def load_manifest(path, vocab: Vocab | None = None):
    """Parse a tab-separated manifest into (entries, vocab).

    Each line is `<relative/audio.ext>\\t<event1,event2,...>`; the event list
    may be empty and `#` lines are comments. Without a vocab one is built
    from the union of events, sorted for determinism; with a vocab every
    event must already be known.
    """
    entries: list[tuple[str, list[str]]] = []
    names: set[str] = set()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected '<path>\\t<events>'")
        rel, _, events_field = line.partition("\t")
        events = [e for e in events_field.strip().split(",") if e] if events_field.strip() else []
        entries.append((rel.strip(), events))
        names.update(events)
    if vocab is None:
        vocab = Vocab.from_names(names)
    else:
        for name in sorted(names):
            vocab.id(name)  # raises naming the unknown event
    return entries, vocab


def write_manifest(path, entries) -> None:
    lines = [f"{rel}\t{','.join(events)}" for rel, events in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass
class LabeledClip:
    """Audio features paired with its sequential label (event token ids)."""

    features: np.ndarray  # (frames, 128) log-mel
    label: list[int]
    path: str = ""


def load_clips(manifest_path, vocab: Vocab | None = None):
    """Materialize every manifest entry: (clips, vocab).

    `.csv` entries are read as spectrograms directly; `.wav` entries go
    through the frontend. Relative paths resolve against the manifest.
    """
    manifest_path = Path(manifest_path)
    entries, vocab = load_manifest(manifest_path, vocab)
    base = manifest_path.parent
    clips = []
    for rel, events in entries:
        p = Path(rel)
        if not p.is_absolute():
            p = base / p
        if p.suffix == ".csv":
            features = frontend.load_spectrogram_csv(p)
        elif p.suffix == ".wav":
            features = frontend.log_mel(frontend.load_wav(p))
        else:
            raise ValueError(f"unsupported feature file {p}: expected .csv or .wav")
        clips.append(LabeledClip(features=features, label=vocab.encode_names(events), path=str(p)))
    return clips, vocab


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    """Clips padded together; feature rows beyond `feat_lengths` hold the
    log-mel floor, label columns beyond `label_lengths` hold PAD."""

    features: np.ndarray  # (B, max_frames, 128)
    feat_lengths: np.ndarray  # (B,)
    normal_in: np.ndarray  # (B, L) int
    normal_tgt: np.ndarray
    reverse_in: np.ndarray
    reverse_tgt: np.ndarray
    label_lengths: np.ndarray  # (B,) = k + 1 supervised steps per clip
    clips: list[LabeledClip] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[0]


def batch_clips(clips: list[LabeledClip], max_len: int | None = None) -> Batch:
    if not clips:
        raise ValueError("cannot batch zero clips")
    if max_len is None:
        max_len = max(len(c.label) for c in clips) + 1
    max_frames = max(c.features.shape[0] for c in clips)
    n_bins = clips[0].features.shape[1]
    feats = np.full((len(clips), max_frames, n_bins), frontend.SPEC_FLOOR, dtype=np.float64)
    rows = [encode_labels(c.label, max_len) for c in clips]
    return Batch(
        features=_fill(feats, [c.features for c in clips]),
        feat_lengths=np.array([c.features.shape[0] for c in clips]),
        normal_in=np.array([r[0] for r in rows], dtype=np.intp),
        normal_tgt=np.array([r[1] for r in rows], dtype=np.intp),
        reverse_in=np.array([r[2] for r in rows], dtype=np.intp),
        reverse_tgt=np.array([r[3] for r in rows], dtype=np.intp),
        label_lengths=np.array([len(c.label) + 1 for c in clips]),
        clips=list(clips),
    )


def _fill(padded: np.ndarray, feature_list) -> np.ndarray:
    for i, f in enumerate(feature_list):
        padded[i, : f.shape[0]] = f
    return padded


def split_dataset(clips, val_fraction: float, rng: np.random.Generator):
    """Seeded shuffle, then split off the first floor(n*val_fraction) clips."""
    order = rng.permutation(len(clips))
    n_val = int(len(clips) * val_fraction)
    val = [clips[i] for i in order[:n_val]]
    train = [clips[i] for i in order[n_val:]]
    return train, val


def make_batches(clips, batch_size: int, seed: int, val_fraction: float = 0.2,
                 max_len: int | None = None):
    """Deterministic (train batches, val batches); split happens before batching."""
    if not clips:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    train, val = split_dataset(clips, val_fraction, rng)
    train_batches = [
        batch_clips(train[i : i + batch_size], max_len) for i in range(0, len(train), batch_size)
    ]
    val_batches = [
        batch_clips(val[i : i + batch_size], max_len) for i in range(0, len(val), batch_size)
    ]
    return train_batches, val_batches
