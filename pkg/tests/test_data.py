"""Vocabulary, label encoding, manifests, batching."""

import numpy as np
import pytest

from gct import frontend
from gct.data import (
    BOS_ID,
    BOS_REV_ID,
    EOS_ID,
    PAD_ID,
    LabeledClip,
    Vocab,
    encode_labels,
    load_clips,
    load_manifest,
    make_batches,
    strip_label,
    write_manifest,
)


class TestVocab:
    def test_control_ids_fixed(self):
        assert (PAD_ID, BOS_ID, BOS_REV_ID, EOS_ID) == (0, 1, 2, 3)

    def test_events_start_at_four_sorted(self):
        v = Vocab.from_names(["speech", "dog", "water", "dog"])
        assert v.events == ["dog", "speech", "water"]
        assert v.id("dog") == 4
        assert v.size == 7

    def test_bijection(self):
        v = Vocab.from_names(["a", "b"])
        for name in ["a", "b"]:
            assert v.name(v.id(name)) == name
        assert v.name(EOS_ID) == "<e>"

    def test_reserved_names_rejected(self):
        with pytest.raises(ValueError, match="control"):
            Vocab(["<pad>"])

    def test_separator_characters_rejected(self):
        with pytest.raises(ValueError, match="invalid"):
            Vocab(["a,b"])

    def test_unknown_event_named_in_error(self):
        v = Vocab.from_names(["a"])
        with pytest.raises(KeyError, match="zebra"):
            v.id("zebra")


class TestEncodeLabels:
    def test_three_event_layout(self):
        a, b, c = 4, 5, 6
        n_in, n_tgt, r_in, r_tgt = encode_labels([a, b, c], max_len=4)
        assert n_in == [BOS_ID, a, b, c]
        assert n_tgt == [a, b, c, EOS_ID]
        assert r_in == [BOS_REV_ID, c, b, a]
        assert r_tgt == [c, b, a, EOS_ID]

    def test_empty_sequence(self):
        n_in, n_tgt, r_in, r_tgt = encode_labels([], max_len=3)
        assert n_in == [BOS_ID, PAD_ID, PAD_ID]
        assert n_tgt == [EOS_ID, PAD_ID, PAD_ID]
        assert r_in == [BOS_REV_ID, PAD_ID, PAD_ID]
        assert r_tgt == [EOS_ID, PAD_ID, PAD_ID]

    def test_reverse_target_is_reversed_prefix(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            k = int(rng.integers(0, 6))
            label = list(rng.integers(4, 30, size=k))
            _, n_tgt, _, r_tgt = encode_labels(label, max_len=8)
            assert r_tgt[:k] == n_tgt[:k][::-1]
            assert r_tgt[k:] == n_tgt[k:]

    def test_invertible_via_strip(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            label = list(rng.integers(4, 9, size=int(rng.integers(0, 5))))
            _, n_tgt, _, r_tgt = encode_labels(label, max_len=8)
            assert strip_label(n_tgt) == label
            assert strip_label(r_tgt)[::-1] == label

    def test_overflow_reports_sizes(self):
        with pytest.raises(ValueError, match="4 events.*max_len is 4"):
            encode_labels([4, 5, 6, 7], max_len=4)

    def test_control_token_inside_label_rejected(self):
        with pytest.raises(ValueError, match="control"):
            encode_labels([4, EOS_ID], max_len=6)


class TestManifest:
    def test_vocab_size_from_three_events(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("a.csv\tdog,water\nb.csv\tspeech\n")
        entries, vocab = load_manifest(path)
        assert len(entries) == 2
        assert vocab.size == 7

    def test_duplicates_collapse(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("a.csv\tdog\nb.csv\tdog\n")
        _, vocab = load_manifest(path)
        assert vocab.events == ["dog"]

    def test_comments_and_empty_event_lists(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("# header\na.csv\t\nb.csv\tdog\n")
        entries, _ = load_manifest(path)
        assert entries[0] == ("a.csv", [])

    def test_roundtrip_preserves_order_and_labels(self, tmp_path):
        entries = [("x/one.csv", ["b", "a"]), ("two.csv", []), ("three.csv", ["c"])]
        path = tmp_path / "m.tsv"
        write_manifest(path, entries)
        back, _ = load_manifest(path)
        assert back == entries

    def test_unknown_event_at_eval_time(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("a.csv\tnew_event\n")
        vocab = Vocab.from_names(["dog"])
        with pytest.raises(KeyError, match="new_event"):
            load_manifest(path, vocab)

    def test_load_clips_reads_spectrograms(self, tmp_path):
        spec = np.random.default_rng(2).normal(size=(10, 128))
        frontend.save_spectrogram_csv(tmp_path / "a.csv", spec)
        write_manifest(tmp_path / "m.tsv", [("a.csv", ["dog"])])
        clips, vocab = load_clips(tmp_path / "m.tsv")
        assert clips[0].label == [vocab.id("dog")]
        np.testing.assert_array_equal(clips[0].features, spec)


def _fake_clips(n, rng, frames=None):
    clips = []
    for i in range(n):
        t = frames or int(rng.integers(5, 12))
        clips.append(LabeledClip(
            features=rng.normal(size=(t, 128)),
            label=list(rng.integers(4, 8, size=int(rng.integers(0, 4)))),
            path=f"clip{i}",
        ))
    return clips


class TestBatching:
    def test_ten_clips_split_8_2(self):
        clips = _fake_clips(10, np.random.default_rng(3))
        train, val = make_batches(clips, batch_size=4, seed=0, val_fraction=0.2)
        assert sum(len(b) for b in train) == 8
        assert sum(len(b) for b in val) == 2

    def test_batch_size_larger_than_dataset_gives_single_batch(self):
        clips = _fake_clips(5, np.random.default_rng(4))
        train, _ = make_batches(clips, batch_size=64, seed=0, val_fraction=0.0)
        assert len(train) == 1 and len(train[0]) == 5

    def test_same_seed_same_split_and_order(self):
        clips = _fake_clips(20, np.random.default_rng(5))
        a_train, a_val = make_batches(clips, batch_size=4, seed=9)
        b_train, b_val = make_batches(clips, batch_size=4, seed=9)
        assert [[c.path for c in b.clips] for b in a_train] == \
               [[c.path for c in b.clips] for b in b_train]
        assert [[c.path for c in b.clips] for b in a_val] == \
               [[c.path for c in b.clips] for b in b_val]

    def test_feature_padding_uses_spec_floor(self):
        rng = np.random.default_rng(6)
        clips = _fake_clips(3, rng)
        batch = make_batches(clips, batch_size=3, seed=0, val_fraction=0.0)[0][0]
        for i, clip in enumerate(batch.clips):
            t = clip.features.shape[0]
            np.testing.assert_array_equal(batch.features[i, :t], clip.features)
            assert (batch.features[i, t:] == frontend.SPEC_FLOOR).all()

    def test_label_padding_is_pad_id(self):
        rng = np.random.default_rng(7)
        clips = _fake_clips(4, rng)
        batch = make_batches(clips, batch_size=4, seed=0, val_fraction=0.0)[0][0]
        for i, clip in enumerate(batch.clips):
            k1 = len(clip.label) + 1
            assert (batch.normal_tgt[i, k1:] == PAD_ID).all()
            assert batch.label_lengths[i] == k1

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            make_batches([], batch_size=4, seed=0)
