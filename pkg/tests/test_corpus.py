import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from acoustic_patterns.corpus import (
    CorpusFormatError,
    FeatureConfig,
    FeatureCorpus,
    FeatureSequence,
    Waveform,
    apply_cmvn,
    compute_features,
    deltas,
    extract_directory,
    load_corpus,
    load_wav,
    save_corpus,
)


def write_wav(path, samples, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(np.asarray(samples, dtype="<i2" if width == 2 else "u1").tobytes())


class TestLoadWav:
    def test_silence(self, tmp_path):
        p = tmp_path / "quiet.wav"
        write_wav(p, np.zeros(16000))
        w = load_wav(p)
        assert w.id == "quiet"
        assert w.sample_rate == 16000
        assert len(w.samples) == 16000
        assert not np.any(w.samples)

    def test_full_scale(self, tmp_path):
        p = tmp_path / "loud.wav"
        write_wav(p, np.full(800, 32767))
        np.testing.assert_allclose(load_wav(p).samples, 1.0, atol=1e-4)

    def test_stereo_rejected(self, tmp_path):
        p = tmp_path / "st.wav"
        write_wav(p, np.zeros(200), channels=2)
        with pytest.raises(CorpusFormatError, match="unsupported channel count"):
            load_wav(p)

    def test_8bit_rejected(self, tmp_path):
        p = tmp_path / "b.wav"
        write_wav(p, np.full(200, 128), width=1)
        with pytest.raises(CorpusFormatError, match="16-bit"):
            load_wav(p)

    def test_garbage_rejected(self, tmp_path):
        p = tmp_path / "g.wav"
        p.write_bytes(b"not a wav file at all")
        with pytest.raises(CorpusFormatError, match="unreadable"):
            load_wav(p)


class TestFeatures:
    def test_frame_count_and_dim(self):
        rng = np.random.default_rng(0)
        f = compute_features(Waveform(rng.uniform(-0.5, 0.5, 16000), 16000, "x"))
        # (16000 - 400) // 160 + 1
        assert f.frames.shape == (98, 39)

    @pytest.mark.parametrize("n", [400, 559, 560, 4321])
    def test_frame_count_formula(self, n):
        f = compute_features(Waveform(np.random.default_rng(n).normal(size=n) * 0.1, 16000, "x"))
        assert len(f) == (n - 400) // 160 + 1

    def test_silence(self):
        f = compute_features(Waveform(np.zeros(16000), 16000, "s"))
        np.testing.assert_allclose(f.frames[:, 1:13], 0.0, atol=1e-9)
        np.testing.assert_allclose(f.frames[:, 13:], 0.0, atol=1e-9)

    def test_deterministic(self):
        x = np.random.default_rng(1).normal(size=8000) * 0.2
        a = compute_features(Waveform(x, 16000, "a"))
        b = compute_features(Waveform(x.copy(), 16000, "a"))
        assert a == b
        assert a.frames.tobytes() == b.frames.tobytes()

    def test_too_short(self):
        with pytest.raises(ValueError, match="shorter than one analysis window"):
            compute_features(Waveform(np.zeros(399), 16000, "s"))

    def test_invalid_waveform(self):
        with pytest.raises(ValueError):
            Waveform(np.zeros(0), 16000, "e")
        with pytest.raises(ValueError):
            Waveform(np.zeros(10), 0, "e")


class TestDeltas:
    @given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)), st.integers(1, 30))
    def test_constant_frames_give_zero(self, row, n):
        x = np.tile(row, (n, 1))
        assert not np.any(deltas(x, 2))

    def test_linear_ramp(self):
        # the regression slope of a ramp is its step, away from the padded edges
        x = np.arange(20, dtype=float)[:, None] * 0.5
        np.testing.assert_allclose(deltas(x, 2)[2:-2], 0.5)

    def test_against_direct_formula(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(12, 3))
        d = deltas(x, 2)
        pad = np.vstack([x[:1], x[:1], x, x[-1:], x[-1:]])
        for t in range(12):
            num = sum(k * (pad[t + 2 + k] - pad[t + 2 - k]) for k in (1, 2))
            np.testing.assert_allclose(d[t], num / 10.0)


class TestCmvn:
    def test_zero_mean_unit_variance(self):
        rng = np.random.default_rng(2)
        c = FeatureCorpus(tuple(FeatureSequence(rng.normal(3, 2, size=(n, 4)), f"u{n}") for n in (5, 9, 13)))
        x = apply_cmvn(c).stacked()
        np.testing.assert_allclose(x.mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(x.std(0), 1, atol=1e-12)

    def test_constant_dimension_untouched_scale(self):
        c = FeatureCorpus((FeatureSequence(np.ones((4, 2)), "a"),))
        np.testing.assert_array_equal(apply_cmvn(c).stacked(), 0.0)


class TestArchive:
    def test_empty(self, tmp_path):
        p = tmp_path / "e.pff"
        save_corpus(FeatureCorpus(()), p)
        assert len(load_corpus(p)) == 0
        assert p.read_bytes() == b"PFF1" + struct.pack("<II", 1, 0)

    def test_three_utterances(self, tmp_path):
        rng = np.random.default_rng(3)
        c = FeatureCorpus(
            tuple(
                FeatureSequence(rng.normal(size=(n, 39)).astype(np.float32).astype(np.float64), uid)
                for n, uid in ((3, "a"), (1, "bé"), (7, "c"))
            )
        )
        p = tmp_path / "c.pff"
        save_corpus(c, p)
        assert load_corpus(p) == c

    def test_layout(self, tmp_path):
        p = tmp_path / "l.pff"
        save_corpus(FeatureCorpus((FeatureSequence(np.array([[1.0, 2.0]]), "ab"),)), p)
        expected = b"PFF1" + struct.pack("<IIIbbII", 1, 1, 2, ord("a"), ord("b"), 1, 2) + struct.pack("<ff", 1, 2)
        assert p.read_bytes() == expected

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "b.pff"
        save_corpus(FeatureCorpus((FeatureSequence(np.zeros((2, 2)), "a"),)), p)
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(CorpusFormatError, match="bad header"):
            load_corpus(p)

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "v.pff"
        p.write_bytes(b"PFF1" + struct.pack("<II", 2, 0))
        with pytest.raises(CorpusFormatError, match="version"):
            load_corpus(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.pff"
        save_corpus(FeatureCorpus((FeatureSequence(np.zeros((5, 3)), "a"),)), p)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(CorpusFormatError, match="truncated"):
            load_corpus(p)

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(
            arrays(
                np.float32,
                st.tuples(st.integers(1, 6), st.integers(1, 5)),
                elements=st.floats(-1e6, 1e6, width=32),
            ),
            max_size=4,
        )
    )
    def test_round_trip_property(self, tmp_path_factory, mats):
        c = FeatureCorpus(tuple(FeatureSequence(m.astype(np.float64), f"u{i}") for i, m in enumerate(mats)))
        p = tmp_path_factory.mktemp("rt") / "c.pff"
        save_corpus(c, p)
        assert load_corpus(p) == c

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            FeatureCorpus((FeatureSequence(np.zeros((1, 1)), "a"), FeatureSequence(np.zeros((1, 1)), "a")))


def test_extract_directory(tmp_path):
    rng = np.random.default_rng(4)
    for name in ("b", "a"):
        write_wav(tmp_path / f"{name}.wav", (rng.normal(size=4000) * 3000).astype(np.int16))
    c = extract_directory(tmp_path)
    assert c.ids == ["a", "b"]
    assert c.dim == 39
    np.testing.assert_allclose(c.stacked().mean(0), 0, atol=1e-9)
    raw = extract_directory(tmp_path, FeatureConfig(cmvn=False))
    assert not np.allclose(raw.stacked().mean(0), 0)
