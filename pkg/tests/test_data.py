import hashlib

import numpy as np
import pytest

from seglid import data as D


def _seq(n, f=3, uid="u0", seed=0):
    rng = np.random.default_rng(seed)
    return D.FeatureSequence(frames=rng.standard_normal((n, f)).astype(np.float32),
                             utterance_id=uid)


class TestPartition:
    def test_drop_tail_floor(self):
        utt = D.partition(_seq(45), k=20)
        assert utt.segments.shape == (2, 20, 3)

    def test_exact_fit_preserves_order(self):
        seq = _seq(40)
        utt = D.partition(seq, k=20)
        assert utt.segments.shape == (2, 20, 3)
        np.testing.assert_array_equal(utt.segments[0], seq.frames[0:20])
        np.testing.assert_array_equal(utt.segments[1], seq.frames[20:40])

    def test_segment_count_at_default_length(self):
        # 600 frames at a 20 ms step -> 30 segments of ~400 ms each
        assert D.partition(_seq(600), k=20).n_segments == 30

    def test_flatten_roundtrip(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(5, 100))
            k = int(rng.integers(2, 12))
            if n < k:
                continue
            seq = _seq(n, f=4, seed=int(rng.integers(1 << 30)))
            utt = D.partition(seq, k=k)
            t = utt.n_segments
            np.testing.assert_array_equal(D.flatten_segments(utt), seq.frames[: t * k])

    def test_too_short_drop_errors(self):
        with pytest.raises(ValueError, match="too short"):
            D.partition(_seq(7), k=20)

    def test_pad_policy_short_utterance(self):
        seq = _seq(7)
        utt = D.partition(seq, k=20, policy="pad")
        assert utt.segments.shape == (1, 20, 3)
        assert utt.frame_mask.sum() == 7
        assert utt.n_valid_frames == 7
        np.testing.assert_array_equal(utt.segments[0, :7], seq.frames)
        assert np.all(utt.segments[0, 7:] == 0.0)

    def test_pad_policy_keeps_every_frame(self):
        seq = _seq(45)
        utt = D.partition(seq, k=20, policy="pad")
        assert utt.segments.shape == (3, 20, 3)
        assert utt.n_valid_frames == 45

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            D.FeatureSequence(frames=np.zeros((0, 3), dtype=np.float32), utterance_id="e")

    def test_bad_k(self):
        with pytest.raises(ValueError):
            D.partition(_seq(40), k=1)


class TestFeatureFiles:
    def test_bit_exact_roundtrip(self, tmp_path):
        seq = _seq(33, f=9, uid="roundtrip")
        path = tmp_path / "roundtrip.phof"
        D.write_feature_file(path, seq)
        back = D.read_feature_file(path)
        assert back.utterance_id == "roundtrip"
        assert back.frames.dtype == np.float32
        assert back.frames.tobytes() == seq.frames.tobytes()

    def test_header_contents(self, tmp_path):
        path = tmp_path / "x.phof"
        D.write_feature_file(path, _seq(5, f=2))
        raw = path.read_bytes()
        assert raw[:4] == b"PHOF"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 5
        assert int.from_bytes(raw[12:16], "little") == 2
        assert len(raw) == 16 + 4 * 5 * 2

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.phof"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(ValueError, match="magic"):
            D.read_feature_file(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.phof"
        D.write_feature_file(path, _seq(5, f=2))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError, match="truncated"):
            D.read_feature_file(path)


class TestManifest:
    def test_first_appearance_label_order(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a.phof\tar\t100\nb.phof\tzh\t80\nc.phof\tar\t90\n")
        m = D.load_manifest(p)
        assert m.label_map == {"ar": 0, "zh": 1}
        assert m.n_languages == 2
        assert [e.path for e in m.entries] == ["a.phof", "b.phof", "c.phof"]

    def test_empty_file_errors(self, tmp_path):
        p = tmp_path / "empty.tsv"
        p.write_text("")
        with pytest.raises(ValueError, match="empty"):
            D.load_manifest(p)

    def test_missing_field_names_line(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a.phof\tar\t100\nb.phof\tzh\n")
        with pytest.raises(ValueError, match=r":2:"):
            D.load_manifest(p)

    def test_bad_n_frames_names_line(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a.phof\tar\tmany\n")
        with pytest.raises(ValueError, match=r":1:.*n_frames"):
            D.load_manifest(p)

    def test_explicit_map_rejects_unknown_label(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a.phof\tar\t100\nb.phof\tfr\t80\n")
        with pytest.raises(ValueError, match="fr"):
            D.load_manifest(p, label_map={"ar": 0, "zh": 1})

    def test_label_map_roundtrip(self, tmp_path):
        path = tmp_path / "labels.tsv"
        D.save_label_map(path, {"zh": 1, "ar": 0})
        assert D.load_label_map(path) == {"ar": 0, "zh": 1}

    def test_manifest_roundtrip_and_counts(self, tmp_path):
        rng = np.random.default_rng(3)
        labels = [f"l{int(i)}" for i in rng.integers(0, 4, size=25)]
        entries = [D.ManifestEntry(path=f"f{i}.phof", label=lab, n_frames=10 + i)
                   for i, lab in enumerate(labels)]
        label_map = {}
        for lab in labels:
            label_map.setdefault(lab, len(label_map))
        m = D.Manifest(entries=entries, label_map=label_map)
        p = tmp_path / "m.tsv"
        D.save_manifest(p, m)
        back = D.load_manifest(p)
        assert back.label_map == m.label_map
        per_language = {lab: sum(1 for e in back.entries if e.label == lab)
                        for lab in label_map}
        assert sum(per_language.values()) == len(back.entries)

    def test_label_map_must_be_contiguous(self):
        with pytest.raises(ValueError, match="0..C-1"):
            D.Manifest(entries=[], label_map={"a": 0, "b": 2})


class TestSynthCorpus:
    def _two_specs(self, noise=0.0, f=4):
        means_a = np.eye(2, f)
        means_b = -np.eye(2, f)
        trans = np.full((2, 2), 0.5)
        return [
            D.SyntheticLanguageSpec(name="a", phone_means=means_a, transition=trans,
                                    dwell_frames=(2, 4), noise_std=noise),
            D.SyntheticLanguageSpec(name="b", phone_means=means_b, transition=trans,
                                    dwell_frames=(2, 4), noise_std=noise),
        ]

    def test_degenerate_single_phone_chain(self):
        mean = np.array([[1.0, 2.0, 3.0]])
        spec = D.SyntheticLanguageSpec(name="x", phone_means=mean,
                                       transition=np.array([[1.0]]),
                                       dwell_frames=(2, 3), noise_std=0.0)
        other = D.SyntheticLanguageSpec(name="y", phone_means=mean + 1,
                                        transition=np.array([[1.0]]),
                                        dwell_frames=(2, 3), noise_std=0.0)
        corpus = D.synth_corpus([spec, other], n_utts=2, n_frames=10, seed=5)
        np.testing.assert_array_equal(corpus[0].features.frames,
                                      np.tile(mean.astype(np.float32), (10, 1)))

    def test_noise_free_separable_by_mean(self):
        corpus = D.synth_corpus(self._two_specs(), n_utts=20, n_frames=30, seed=1)
        for u in corpus:
            mean = u.features.frames.mean()
            assert (mean > 0) == (u.label == 0)

    def test_deterministic_given_seed(self):
        a = D.synth_corpus(self._two_specs(noise=0.3), n_utts=6, n_frames=25, seed=42)
        b = D.synth_corpus(self._two_specs(noise=0.3), n_utts=6, n_frames=25, seed=42)
        for ua, ub in zip(a, b):
            assert ua.features.frames.tobytes() == ub.features.frames.tobytes()
            np.testing.assert_array_equal(ua.phone_ids, ub.phone_ids)

    def test_balanced_round_robin_labels(self):
        corpus = D.synth_corpus(self._two_specs(), n_utts=9, n_frames=20, seed=0)
        assert [u.label for u in corpus] == [0, 1] * 4 + [0]

    def test_dwell_floor_bounds_adjacent_changes(self):
        # dwell >= 2 means at least half of adjacent frame pairs share a phone
        specs = self._two_specs(noise=0.1)
        corpus = D.synth_corpus(specs, n_utts=10, n_frames=200, seed=9)
        for u in corpus:
            same = np.mean(u.phone_ids[:-1] == u.phone_ids[1:])
            assert same >= 0.5

    def test_non_stochastic_transition_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            D.SyntheticLanguageSpec(name="bad", phone_means=np.zeros((2, 3)),
                                    transition=np.array([[0.5, 0.4], [0.5, 0.5]]))

    def test_needs_two_specs(self):
        with pytest.raises(ValueError, match="2 language specs"):
            D.synth_corpus(self._two_specs()[:1], n_utts=2, n_frames=10, seed=0)

    def test_phone_change_points(self):
        ids = np.array([0, 0, 1, 1, 1, 2, 2])
        np.testing.assert_array_equal(D.phone_change_points(ids), [1, 4])


class TestCorpusConfig:
    def test_default_config_builds(self):
        cfg = D.default_synth_config()
        cfg["n_utterances"] = 12
        corpus, specs = D.build_corpus_from_config(cfg)
        assert len(corpus) == 12
        assert len(specs) == 3
        assert corpus[0].features.feature_dim == cfg["feature_dim"]

    def test_explicit_language_specs(self):
        cfg = {
            "seed": 3, "n_utterances": 4, "n_frames": 12,
            "language_specs": [
                {"name": "p", "phone_means": [[1.0, 0.0]], "transition": [[1.0]],
                 "dwell_frames": [2, 3]},
                {"name": "q", "phone_means": [[0.0, 1.0]], "transition": [[1.0]],
                 "dwell_frames": [2, 3]},
            ],
        }
        corpus, specs = D.build_corpus_from_config(cfg)
        assert [s.name for s in specs] == ["p", "q"]
        assert corpus[0].features.frames[0, 0] == 1.0

    def test_corpus_config_deterministic(self):
        cfg = D.default_synth_config()
        cfg["n_utterances"] = 6
        a, _ = D.build_corpus_from_config(cfg)
        b, _ = D.build_corpus_from_config(cfg)
        digest = lambda c: hashlib.sha256(
            b"".join(u.features.frames.tobytes() for u in c)).hexdigest()
        assert digest(a) == digest(b)


class TestVad:
    def test_drops_low_energy_frames(self):
        frames = np.vstack([np.ones((3, 4)), np.zeros((2, 4)), np.ones((1, 4))])
        seq = D.FeatureSequence(frames=frames.astype(np.float32), utterance_id="v")
        out = D.energy_vad(seq, threshold=0.5)
        assert out.n_frames == 4

    def test_all_dropped_errors(self):
        seq = D.FeatureSequence(frames=np.full((3, 2), 0.01, dtype=np.float32),
                                utterance_id="v")
        with pytest.raises(ValueError, match="every frame"):
            D.energy_vad(seq, threshold=1.0)


class TestLoadDataset:
    def test_load_and_label(self, tmp_path):
        (tmp_path / "feat").mkdir()
        entries = []
        for i, lab in enumerate(["x", "y", "x"]):
            seq = _seq(25, f=3, uid=f"u{i}", seed=i)
            D.write_feature_file(tmp_path / "feat" / f"u{i}.phof", seq)
            entries.append(D.ManifestEntry(path=f"feat/u{i}.phof", label=lab,
                                           n_frames=25))
        m = D.Manifest(entries=entries, label_map={"x": 0, "y": 1})
        ds = D.load_dataset(m, tmp_path, k=10)
        assert [u.label for u in ds] == [0, 1, 0]
        assert all(u.segments.shape == (2, 10, 3) for u in ds)

    def test_frame_count_mismatch(self, tmp_path):
        seq = _seq(25, f=3, uid="u0")
        D.write_feature_file(tmp_path / "u0.phof", seq)
        m = D.Manifest(entries=[D.ManifestEntry(path="u0.phof", label="x", n_frames=30)],
                       label_map={"x": 0})
        with pytest.raises(ValueError, match="30 frames"):
            D.load_dataset(m, tmp_path, k=10)
