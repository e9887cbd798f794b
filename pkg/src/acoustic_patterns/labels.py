"""Word-like token labels for a corpus, with subword time alignments."""

from __future__ import annotations

import json
from dataclasses import dataclass

from .fileio import write_json


@dataclass(frozen=True)
class Token:
    """One word-like token.

    ``subword_spans`` holds the (start, end) frame span of each subword in
    ``subwords``; spans are contiguous and together cover [start, end).
    """

    word: int
    start: int
    end: int
    subwords: tuple
    subword_spans: tuple

    def __post_init__(self):
        object.__setattr__(self, "subwords", tuple(int(s) for s in self.subwords))
        object.__setattr__(self, "subword_spans", tuple((int(a), int(b)) for a, b in self.subword_spans))
        if not self.subwords:
            raise ValueError("token has no subwords")
        if len(self.subwords) != len(self.subword_spans):
            raise ValueError("one span per subword required")
        if self.start >= self.end:
            raise ValueError(f"empty token span [{self.start}, {self.end})")
        pos = self.start
        for a, b in self.subword_spans:
            if a != pos or b <= a:
                raise ValueError(f"subword spans do not tile token [{self.start}, {self.end})")
            pos = b
        if pos != self.end:
            raise ValueError(f"subword spans do not tile token [{self.start}, {self.end})")


@dataclass(frozen=True)
class UtteranceLabel:
    utterance_id: str
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def words(self):
        return [t.word for t in self.tokens]

    @property
    def subword_stream(self):
        return [s for t in self.tokens for s in t.subwords]

    @property
    def subword_spans(self):
        return [span for t in self.tokens for span in t.subword_spans]

    @property
    def n_frames(self):
        return self.tokens[-1].end if self.tokens else 0

    def frame_subwords(self):
        """Subword id of every frame."""
        out = []
        for s, (a, b) in zip(self.subword_stream, self.subword_spans):
            out.extend([s] * (b - a))
        return out


@dataclass(frozen=True)
class CorpusLabels:
    utterances: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    @property
    def ids(self):
        return [u.utterance_id for u in self.utterances]

    def by_id(self):
        return {u.utterance_id: u for u in self.utterances}

    def subword_ids(self):
        return sorted({s for u in self.utterances for t in u.tokens for s in t.subwords})

    def word_ids(self):
        return sorted({t.word for u in self.utterances for t in u.tokens})

    def check_tiling(self, lengths):
        """Raise unless every utterance's tokens tile ``lengths[utterance_id]`` frames."""
        for u in self.utterances:
            pos = 0
            for t in u.tokens:
                if t.start != pos:
                    raise ValueError(f"{u.utterance_id}: gap or overlap at frame {pos}")
                pos = t.end
            if pos != lengths[u.utterance_id]:
                raise ValueError(f"{u.utterance_id}: labels end at {pos}, utterance has {lengths[u.utterance_id]} frames")

    def to_dict(self):
        return {
            "utterances": [
                {
                    "id": u.utterance_id,
                    "tokens": [
                        {
                            "word_pattern_id": t.word,
                            "subword_ids": list(t.subwords),
                            "start_frame": t.start,
                            "end_frame": t.end,
                            "subword_spans": [list(s) for s in t.subword_spans],
                        }
                        for t in u.tokens
                    ],
                }
                for u in self.utterances
            ]
        }

    @classmethod
    def from_dict(cls, d):
        utts = []
        for u in d["utterances"]:
            tokens = []
            for t in u["tokens"]:
                spans = t.get("subword_spans")
                if spans is None:
                    # files without alignments: split the token evenly
                    n = len(t["subword_ids"])
                    a, b = t["start_frame"], t["end_frame"]
                    cuts = [a + (b - a) * k // n for k in range(n + 1)]
                    spans = list(zip(cuts[:-1], cuts[1:]))
                tokens.append(Token(t["word_pattern_id"], t["start_frame"], t["end_frame"], t["subword_ids"], spans))
            utts.append(UtteranceLabel(u["id"], tokens))
        return cls(tuple(utts))




def save_labels(labels: CorpusLabels, path):
    write_json(labels.to_dict(), path)


def load_labels(path) -> CorpusLabels:
    with open(path, encoding="utf-8") as fh:
        return CorpusLabels.from_dict(json.load(fh))
