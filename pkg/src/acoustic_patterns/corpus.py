"""Audio ingestion, MFCC extraction and the binary feature archive.

Archive layout (little-endian)::

    magic "PFF1" | version u32 | n_utts u32
    per utterance: id_len u32 | id bytes (UTF-8) | n_frames u32 | dim u32 |
                   n_frames * dim float32, row-major

Frames are stored as float32, so a round trip is exact only for values that
are float32-representable. The frame shift is not stored; loaded sequences
get the 10 ms default.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .fileio import atomic_write_bytes

MAGIC = b"PFF1"
VERSION = 1


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int
    id: str

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if len(self.samples) == 0:
            raise ValueError("waveform has no samples")


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    utterance_id: str
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"{self.utterance_id}: need a (n_frames, dim) array with at least one frame")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.utterance_id == other.utterance_id
            and self.frame_shift_ms == other.frame_shift_ms
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(frozen=True)
class FeatureCorpus:
    utterances: tuple = ()

    def __post_init__(self):
        utts = tuple(self.utterances)
        ids = [u.utterance_id for u in utts]
        if len(set(ids)) != len(ids):
            raise ValueError("utterance ids must be unique")
        object.__setattr__(self, "utterances", utts)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    @property
    def ids(self):
        return [u.utterance_id for u in self.utterances]

    @property
    def dim(self):
        return self.utterances[0].dim if self.utterances else 0

    def stacked(self):
        return np.concatenate([u.frames for u in self.utterances], axis=0)


@dataclass(frozen=True)
class FeatureConfig:
    window_ms: float = 25.0
    shift_ms: float = 10.0
    n_mels: int = 40
    n_ceps: int = 13
    preemphasis: float = 0.97
    delta_width: int = 2
    cmvn: bool = True
    f_min: float = 0.0
    f_max: float | None = None


def load_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise CorpusFormatError(f"{path}: unreadable WAV file ({exc})") from exc
    if n_channels != 1:
        raise CorpusFormatError(f"{path}: unsupported channel count {n_channels} (mono required)")
    if width != 2:
        raise CorpusFormatError(f"{path}: unsupported encoding, {8 * width}-bit samples (16-bit PCM required)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate, id=path.stem)


def mel_filterbank(n_mels, n_fft, sample_rate, f_min=0.0, f_max=None):
    """Triangular filters equally spaced on the HTK mel scale, shape (n_mels, n_fft // 2 + 1)."""
    f_max = sample_rate / 2 if f_max is None else f_max

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    mels = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz = mel_to_hz(mels)
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, len(bins)))
    for m in range(n_mels):
        lo, centre, hi = hz[m], hz[m + 1], hz[m + 2]
        up = (bins - lo) / (centre - lo)
        down = (hi - bins) / (hi - centre)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def deltas(x, width=2):
    """Regression deltas over +-width frames with edge replication."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    num = np.zeros_like(x)
    for k in range(1, width + 1):
        num += k * (padded[width + k : width + k + n] - padded[width - k : width - k + n])
    return num / (2.0 * sum(k * k for k in range(1, width + 1)))


def _static_mfcc(w: Waveform, cfg: FeatureConfig):
    win = int(round(cfg.window_ms * w.sample_rate / 1000.0))
    hop = int(round(cfg.shift_ms * w.sample_rate / 1000.0))
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < win:
        raise ValueError(f"{w.id}: waveform shorter than one analysis window ({len(x)} < {win} samples)")
    n_frames = (len(x) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx]
    energy = np.log(np.maximum(np.sum(frames**2, axis=1), 1e-10))

    frames = frames - frames.mean(axis=1, keepdims=True)
    frames = np.concatenate([frames[:, :1], frames[:, 1:] - cfg.preemphasis * frames[:, :-1]], axis=1)
    frames = frames * np.hamming(win)
    n_fft = 1 << (win - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate, cfg.f_min, cfg.f_max)
    logmel = np.log(np.maximum(power @ fb.T, 1e-10))
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, : cfg.n_ceps]
    ceps[:, 0] = energy
    return ceps


def compute_features(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> FeatureSequence:
    """13 MFCCs (c0 replaced by log frame energy) with deltas and delta-deltas.

    Corpus-level normalisation is not applied here; see :func:`apply_cmvn`.
    """
    static = _static_mfcc(w, cfg)
    d1 = deltas(static, cfg.delta_width)
    d2 = deltas(d1, cfg.delta_width)
    return FeatureSequence(np.hstack([static, d1, d2]), w.id, cfg.shift_ms)


def apply_cmvn(corpus: FeatureCorpus) -> FeatureCorpus:
    """Per-corpus mean and variance normalisation."""
    if len(corpus) == 0:
        return corpus
    stacked = corpus.stacked()
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < 1e-10] = 1.0
    return FeatureCorpus(
        tuple(FeatureSequence((u.frames - mean) / std, u.utterance_id, u.frame_shift_ms) for u in corpus)
    )


def extract_directory(in_dir, cfg: FeatureConfig = FeatureConfig()) -> FeatureCorpus:
    paths = sorted(Path(in_dir).glob("*.wav"))
    corpus = FeatureCorpus(tuple(compute_features(load_wav(p), cfg) for p in paths))
    return apply_cmvn(corpus) if cfg.cmvn else corpus


def save_corpus(corpus: FeatureCorpus, path):
    parts = [MAGIC, struct.pack("<II", VERSION, len(corpus))]
    for u in corpus:
        uid = u.utterance_id.encode("utf-8")
        n, d = u.frames.shape
        parts.append(struct.pack("<I", len(uid)))
        parts.append(uid)
        parts.append(struct.pack("<II", n, d))
        parts.append(u.frames.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_corpus(path) -> FeatureCorpus:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorpusFormatError(f"{path}: bad header")
    version, n_utts = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CorpusFormatError(f"{path}: archive version {version}, expected {VERSION}")
    pos = 12
    utts = []
    try:
        for _ in range(n_utts):
            (id_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + id_len > len(data):
                raise struct.error("id past end of data")
            uid = data[pos : pos + id_len].decode("utf-8")
            pos += id_len
            n, d = struct.unpack_from("<II", data, pos)
            pos += 8
            nbytes = 4 * n * d
            if pos + nbytes > len(data):
                raise struct.error("frames past end of data")
            frames = np.frombuffer(data, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
            pos += nbytes
            utts.append(FeatureSequence(frames.astype(np.float64), uid))
    except struct.error as exc:
        raise CorpusFormatError(f"{path}: truncated file ({exc})") from exc
    if pos != len(data):
        raise CorpusFormatError(f"{path}: trailing bytes after {n_utts} utterances")
    return FeatureCorpus(tuple(utts))
