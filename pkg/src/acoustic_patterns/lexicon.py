"""Word-like pattern lexicon: subword sequences with corpus counts."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

from .labels import CorpusLabels, Token, UtteranceLabel, write_json


@dataclass(frozen=True)
class WordPattern:
    id: int
    subwords: tuple
    count: int = 0

    def __post_init__(self):
        object.__setattr__(self, "subwords", tuple(int(s) for s in self.subwords))
        if not self.subwords:
            raise ValueError(f"word pattern {self.id} has no subwords")


class Lexicon:
    """Mapping word-pattern id -> :class:`WordPattern`.

    No two entries share a subword sequence, and every subword id is below
    ``subword_inventory_size``.
    """

    def __init__(self, entries, subword_inventory_size):
        self.entries = {}
        self._by_seq = {}
        self.subword_inventory_size = int(subword_inventory_size)
        for e in sorted(entries, key=lambda e: e.id):
            if e.id in self.entries:
                raise ValueError(f"duplicate word pattern id {e.id}")
            if e.subwords in self._by_seq:
                raise ValueError(f"subword sequence {e.subwords} listed twice")
            if any(s < 0 or s >= self.subword_inventory_size for s in e.subwords):
                raise ValueError(f"word pattern {e.id} uses a subword outside the inventory")
            self.entries[e.id] = e
            self._by_seq[e.subwords] = e.id

    def __len__(self):
        return len(self.entries)

    def __contains__(self, word_id):
        return word_id in self.entries

    def __getitem__(self, word_id):
        return self.entries[word_id]

    def __eq__(self, other):
        return (
            isinstance(other, Lexicon)
            and self.entries == other.entries
            and self.subword_inventory_size == other.subword_inventory_size
        )

    def __repr__(self):
        return f"Lexicon({len(self)} entries, inventory={self.subword_inventory_size})"

    @property
    def ids(self):
        return list(self.entries)

    def id_of(self, subwords):
        return self._by_seq.get(tuple(subwords))

    def max_id(self):
        return max(self.entries, default=-1)

    def multi_subword(self):
        return [e for e in self.entries.values() if len(e.subwords) > 1]

    def sequences(self):
        return {e.subwords for e in self.entries.values()}

    def covers_all_subwords(self):
        return all((s,) in self._by_seq for s in range(self.subword_inventory_size))

    def to_dict(self):
        return {
            "subword_inventory_size": self.subword_inventory_size,
            "entries": [{"id": e.id, "subwords": list(e.subwords), "count": e.count} for e in self.entries.values()],
        }

    @classmethod
    def from_dict(cls, d):
        entries = [WordPattern(e["id"], e["subwords"], e.get("count", 0)) for e in d["entries"]]
        size = d.get("subword_inventory_size")
        if size is None:
            size = 1 + max((s for e in entries for s in e.subwords), default=-1)
        return cls(entries, size)


def count_patterns(labels: CorpusLabels):
    """Token counts per subword sequence, plus the lowest word id seen for each."""
    counts = Counter()
    first_id = {}
    for u in labels:
        for t in u.tokens:
            counts[t.subwords] += 1
            if t.subwords not in first_id or t.word < first_id[t.subwords]:
                first_id[t.subwords] = t.word
    return counts, first_id


def harvest_lexicon(labels: CorpusLabels, min_count=5, n_subwords=None) -> Lexicon:
    """Keep word patterns seen at least ``min_count`` times, plus every singleton subword.

    Ids are carried over from the labels; singletons that never occur as a
    token get fresh ids above the largest id in the labels.
    """
    counts, first_id = count_patterns(labels)
    if n_subwords is None:
        n_subwords = 1 + max((s for seq in counts for s in seq), default=-1)
    entries = []
    for seq, c in counts.items():
        if len(seq) > 1 and c >= min_count:
            entries.append(WordPattern(first_id[seq], seq, c))
    next_id = 1 + max(first_id.values(), default=-1)
    for s in range(n_subwords):
        seq = (s,)
        if seq in first_id:
            entries.append(WordPattern(first_id[seq], seq, counts[seq]))
        else:
            entries.append(WordPattern(next_id, seq, 0))
            next_id += 1
    return Lexicon(entries, n_subwords)


def rewrite_labels(labels: CorpusLabels, lex: Lexicon) -> CorpusLabels:
    """Split every token whose pattern is missing from ``lex`` into singleton tokens."""
    utts = []
    for u in labels:
        tokens = []
        for t in u.tokens:
            wid = lex.id_of(t.subwords)
            if wid is not None:
                tokens.append(Token(wid, t.start, t.end, t.subwords, t.subword_spans))
                continue
            for s, span in zip(t.subwords, t.subword_spans):
                sid = lex.id_of((s,))
                if sid is None:
                    raise ValueError(f"lexicon has no singleton entry for subword {s}")
                tokens.append(Token(sid, span[0], span[1], (s,), (span,)))
        utts.append(UtteranceLabel(u.utterance_id, tokens))
    return CorpusLabels(tuple(utts))


def save_lexicon(lex: Lexicon, path):
    write_json(lex.to_dict(), path)


def load_lexicon(path) -> Lexicon:
    with open(path, encoding="utf-8") as fh:
        return Lexicon.from_dict(json.load(fh))
