"""Synthetic two-level corpora with known ground truth, and pattern-vs-truth scoring.

Units are left-to-right Gaussian trajectory HMMs: the state means of a
unit lie on a short straight path through the unit's centre, and the
centres are pairwise ``separation`` apart. Words are fixed unit
sequences, and utterances draw words from a Zipf distribution.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import FeatureCorpus, FeatureSequence
from .hmm import HMMSet, SubwordHMM
from .labels import CorpusLabels, Token, UtteranceLabel, write_json


@dataclass(frozen=True)
class SynthSpec:
    n_units: int = 5
    n_words: int = 8
    unit_state_count: int = 13
    word_len: tuple = (2, 3)
    utt_len: tuple = (2, 4)
    n_utterances: int = 200
    dim: int = 13
    noise: float = 0.6
    separation: float = 4.0
    # path length of a unit's state means, as a fraction of the separation
    trajectory: float = 0.3
    self_loop: float = 0.3
    zipf: float = 1.0
    seed: int = 0
    # unit sequence forced in as word 0, the most frequent word; empty for none
    planted_word: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "word_len", tuple(self.word_len))
        object.__setattr__(self, "utt_len", tuple(self.utt_len))
        object.__setattr__(self, "planted_word", tuple(int(u) for u in self.planted_word))
        if any(not 0 <= u < self.n_units for u in self.planted_word):
            raise ValueError("planted_word uses unknown units")
        if self.n_units < 2:
            raise ValueError("n_units must be >= 2")
        if self.separation <= 0:
            raise ValueError("separation must be > 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        n_possible = sum(self.n_units**k for k in range(self.word_len[0], self.word_len[1] + 1))
        if self.n_words > n_possible:
            raise ValueError("more words requested than distinct unit sequences exist")


@dataclass
class GroundTruth:
    """Generator ground truth.

    ``utterances`` maps utterance id to ``{"words": [(word, start, end)],
    "units": [(unit, start, end)]}``; ``words`` lists each word's unit
    sequence; ``unit_means`` has shape (n_units, n_states, dim).
    """

    words: list
    unit_means: np.ndarray
    noise: float
    self_loop: float
    utterances: dict = field(default_factory=dict)

    @property
    def n_units(self):
        return self.unit_means.shape[0]

    def frame_units(self, uid):
        out = []
        for unit, a, b in self.utterances[uid]["units"]:
            out.extend([unit] * (b - a))
        return np.asarray(out, dtype=np.int64)

    def unit_string(self, uid):
        return [u for u, _, _ in self.utterances[uid]["units"]]

    def to_dict(self):
        return {
            "words": [list(w) for w in self.words],
            "unit_means": self.unit_means.tolist(),
            "noise": self.noise,
            "self_loop": self.self_loop,
            "utterances": [
                {
                    "id": uid,
                    "words": [list(x) for x in rec["words"]],
                    "units": [list(x) for x in rec["units"]],
                }
                for uid, rec in self.utterances.items()
            ],
        }

    @classmethod
    def from_dict(cls, d):
        utts = {
            u["id"]: {"words": [tuple(x) for x in u["words"]], "units": [tuple(x) for x in u["units"]]}
            for u in d["utterances"]
        }
        return cls([tuple(w) for w in d["words"]], np.asarray(d["unit_means"], dtype=np.float64), d["noise"], d["self_loop"], utts)


def save_truth(truth: GroundTruth, path):
    write_json(truth.to_dict(), path)


def load_truth(path) -> GroundTruth:
    with open(path, encoding="utf-8") as fh:
        return GroundTruth.from_dict(json.load(fh))


def spec_from_dict(d) -> SynthSpec:
    known = set(SynthSpec.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
    return SynthSpec(**d)


def _unit_centres(spec: SynthSpec, rng):
    if spec.n_units <= spec.dim:
        q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.n_units)))
        return spec.separation / np.sqrt(2.0) * q.T
    c = rng.standard_normal((spec.n_units, spec.dim))
    d = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))
    return c * spec.separation / d[np.triu_indices(spec.n_units, 1)].min()


def _draw_words(spec: SynthSpec, rng):
    """Distinct words; redrawn until every unit occurs in some word (when that is possible)."""
    can_cover = spec.n_words * spec.word_len[1] >= spec.n_units
    while True:
        words = [spec.planted_word] if spec.planted_word else []
        seen = set(words)
        while len(words) < spec.n_words:
            n = int(rng.integers(spec.word_len[0], spec.word_len[1] + 1))
            w = tuple(int(x) for x in rng.integers(0, spec.n_units, size=n))
            if w not in seen:
                seen.add(w)
                words.append(w)
        if not can_cover or len({u for w in words for u in w}) == spec.n_units:
            return words


def generate(spec: SynthSpec):
    """Return ``(FeatureCorpus, GroundTruth)``; frames are float32-representable."""
    rng = np.random.default_rng(spec.seed)
    S = spec.unit_state_count
    centres = _unit_centres(spec, rng)
    dirs = rng.standard_normal((spec.n_units, spec.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    offsets = (np.linspace(-0.5, 0.5, S) if S > 1 else np.zeros(1)) * spec.trajectory * spec.separation
    means = centres[:, None, :] + offsets[None, :, None] * dirs[:, None, :]
    words = _draw_words(spec, rng)
    weights = 1.0 / np.arange(1, spec.n_words + 1) ** spec.zipf
    weights /= weights.sum()

    utts = []
    truth = GroundTruth(words, means, spec.noise, spec.self_loop)
    for i in range(spec.n_utterances):
        urng = np.random.default_rng([spec.seed, i])
        n_words = int(urng.integers(spec.utt_len[0], spec.utt_len[1] + 1))
        chosen = urng.choice(spec.n_words, size=n_words, p=weights)
        frames = []
        word_spans, unit_spans = [], []
        pos = 0
        for w in chosen:
            w_start = pos
            for unit in words[w]:
                durs = urng.geometric(1.0 - spec.self_loop, size=S)
                state_of_frame = np.repeat(np.arange(S), durs)
                x = means[unit][state_of_frame] + spec.noise * urng.standard_normal((len(state_of_frame), spec.dim))
                frames.append(x)
                unit_spans.append((unit, pos, pos + len(x)))
                pos += len(x)
            word_spans.append((int(w), w_start, pos))
        uid = f"utt{i:04d}"
        x = np.concatenate(frames).astype(np.float32).astype(np.float64)
        utts.append(FeatureSequence(x, uid))
        truth.utterances[uid] = {"words": word_spans, "units": unit_spans}
    return FeatureCorpus(tuple(utts)), truth


def truth_labels(truth: GroundTruth) -> CorpusLabels:
    """Ground truth as labels: one token per true word, true units as subwords."""
    utts = []
    for uid, rec in truth.utterances.items():
        units = iter(rec["units"])
        tokens = []
        for w, a, b in rec["words"]:
            seq = truth.words[w]
            spans = [next(units)[1:] for _ in seq]
            tokens.append(Token(w, a, b, seq, spans))
        utts.append(UtteranceLabel(uid, tokens))
    return CorpusLabels(tuple(utts))


def truth_hmms(truth: GroundTruth, var_floor=1e-6) -> HMMSet:
    """The generator's unit HMMs."""
    n_units, S, D = truth.unit_means.shape
    var = max(truth.noise**2, var_floor)
    ls = np.full(S, np.log(truth.self_loop) if truth.self_loop > 0 else -1e10)
    ln = np.full(S, np.log1p(-truth.self_loop))
    models = {u: SubwordHMM(u, truth.unit_means[u].copy(), np.full((S, D), var), ls.copy(), ln.copy()) for u in range(n_units)}
    return HMMSet(models, D, S, np.full(D, var_floor))


# ------------------------------------------------------------ evaluation


@dataclass
class MappingMatrix:
    """Co-occurrence of discovered subword patterns (rows) with true units (columns).

    ``counts`` tallies every frame; ``central_counts`` tallies each
    discovered segment once, at its central frame. ``assignment`` maps each
    discovered pattern to its most frequent true unit (ties to the lowest
    unit id) under the per-frame tally.
    """

    pattern_ids: list
    counts: np.ndarray
    central_counts: np.ndarray
    assignment: dict

    def majority_targets(self):
        """How many discovered patterns have each true unit as their assignment."""
        hist = np.zeros(self.counts.shape[1], dtype=np.int64)
        for u in self.assignment.values():
            hist[u] += 1
        return hist

    def to_dict(self):
        return {
            "pattern_ids": list(self.pattern_ids),
            "counts": self.counts.tolist(),
            "central_counts": self.central_counts.tolist(),
            "assignment": {str(k): int(v) for k, v in self.assignment.items()},
        }


def map_patterns(labels: CorpusLabels, truth: GroundTruth) -> MappingMatrix:
    ids = labels.subword_ids()
    row = {p: i for i, p in enumerate(ids)}
    counts = np.zeros((len(ids), truth.n_units), dtype=np.int64)
    central = np.zeros_like(counts)
    for u in labels:
        true_units = truth.frame_units(u.utterance_id)
        disc = np.asarray(u.frame_subwords(), dtype=np.int64)
        if len(disc) != len(true_units):
            raise ValueError(f"{u.utterance_id}: labels cover {len(disc)} frames, truth {len(true_units)}")
        rows = np.array([row[s] for s in disc], dtype=np.int64)
        np.add.at(counts, (rows, true_units), 1)
        for s, (a, b) in zip(u.subword_stream, u.subword_spans):
            central[row[s], true_units[(a + b - 1) // 2]] += 1
    assignment = {p: int(np.argmax(counts[row[p]])) for p in ids}
    return MappingMatrix(ids, counts, central, assignment)


def edit_distance(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def pattern_accuracy(labels: CorpusLabels, truth: GroundTruth, mapping: MappingMatrix | None = None):
    """Frame purity and unit accuracy of discovered patterns after mapping each to a true unit.

    Unit accuracy is 1 - (corpus edit distance / reference length) between
    the mapped discovered unit strings and the true ones, clipped at 0.
    """
    if mapping is None:
        mapping = map_patterns(labels, truth)
    total = int(mapping.counts.sum())
    if total == 0:
        raise ValueError("mapping covers no frames")
    correct = sum(int(mapping.counts[i, mapping.assignment[p]]) for i, p in enumerate(mapping.pattern_ids))
    edits = 0
    ref_len = 0
    for u in labels:
        hyp = [mapping.assignment[s] for s in u.subword_stream]
        ref = truth.unit_string(u.utterance_id)
        edits += edit_distance(hyp, ref)
        ref_len += len(ref)
    return {"frame_purity": correct / total, "unit_accuracy": max(0.0, 1.0 - edits / ref_len)}


def spec_to_dict(spec: SynthSpec):
    d = asdict(spec)
    d["word_len"] = list(spec.word_len)
    d["utt_len"] = list(spec.utt_len)
    d["planted_word"] = list(spec.planted_word)
    return d


def std_task(truth: GroundTruth, n_queries=20, max_examples=10):
    """Spoken term detection task over the generator's words.

    The ``n_queries`` most frequent words become query terms. Each term
    keeps up to ``max_examples`` of its true spans as query examples, and an
    utterance is relevant to a term when the word occurs in it. Returns
    ``([(term_id, [(utterance_id, start, end)])], {term_id: set(utterance ids)})``.
    """
    spans = {}
    for uid, rec in truth.utterances.items():
        for w, a, b in rec["words"]:
            spans.setdefault(w, []).append((uid, a, b))
    order = sorted(spans, key=lambda w: (-len(spans[w]), w))[:n_queries]
    queries = []
    relevance = {}
    for w in sorted(order):
        term = f"w{w:03d}"
        queries.append((term, spans[w][:max_examples]))
        relevance[term] = {uid for uid, _, _ in spans[w]}
    return queries, relevance
