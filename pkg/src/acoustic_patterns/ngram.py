"""Witten-Bell smoothed N-gram model over word-pattern ids.

Interpolated Witten-Bell is stored in ARPA backoff form: an observed
n-gram keeps its interpolated probability, and the backoff weight of a
history h is T(h) / (c(h) + T(h)), where c(h) is how often h was followed
by anything and T(h) how many distinct tokens followed it. With that
weight an unseen continuation gets exactly the interpolated mass, so each
conditional distribution sums to one over the vocabulary.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict

from .fileio import atomic_write_bytes

BOS = "<s>"
EOS = "</s>"
LOG10 = math.log(10.0)


class NGramLM:
    """Natural-log probabilities; ``tables[n]`` maps (history, word) to log P for n-grams of order n."""

    def __init__(self, order, vocab, tables, backoff, unk_logprob):
        self.order = order
        self.vocab = list(vocab)
        self.tables = tables
        self.backoff = backoff
        self.unk_logprob = unk_logprob

    def predicted_vocab(self):
        """Every token the model can predict: the words plus the end marker."""
        return list(self.vocab) + [EOS]

    def logprob(self, word, history=()):
        history = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        return _lookup(self.tables, self.backoff, self.unk_logprob, word, history)

    def sentence_logprob(self, words):
        hist = (BOS,)
        total = 0.0
        for w in list(words) + [EOS]:
            total += self.logprob(w, hist)
            hist = hist + (w,)
        return total

    def contexts(self):
        """Histories with at least one observed continuation, shortest first."""
        out = [()]
        for n in range(2, self.order + 1):
            out.extend(sorted({h for (h, _) in self.tables[n]}, key=_sort_key))
        return out


def _lookup(tables, backoff, unk, word, history):
    total = 0.0
    while True:
        lp = tables[len(history) + 1].get((history, word))
        if lp is not None:
            return total + lp
        if not history:
            return total + unk
        total += backoff.get(history, 0.0)
        history = history[1:]


def _sort_key(tokens):
    return tuple((0, t) if isinstance(t, str) else (1, t) for t in (tokens if isinstance(tokens, tuple) else (tokens,)))


def lm_logprob(lm: NGramLM, sequence) -> float:
    """Sum of conditional log probabilities of ``sequence`` including the end marker."""
    return lm.sentence_logprob(sequence)


def estimate_ngram(labels, order=2, vocab=None) -> NGramLM:
    """Witten-Bell N-gram from word sequences.

    ``labels`` is either a :class:`~acoustic_patterns.labels.CorpusLabels`
    or an iterable of word-id lists. ``vocab`` adds words that never occur
    (e.g. lexicon entries unused by the labels).
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    sentences = [list(u.words) if hasattr(u, "words") else list(u) for u in labels]
    if not sentences:
        raise ValueError("cannot estimate a language model from empty labels")
    words = set(vocab or ()) | {w for s in sentences for w in s}
    vocab_sorted = sorted(words)
    predicted = vocab_sorted + [EOS]
    base = -math.log(len(predicted))

    # counts[n][(h, w)] for n-grams of order n
    counts = {n: Counter() for n in range(1, order + 1)}
    for s in sentences:
        seq = [BOS] + s + [EOS]
        for i in range(1, len(seq)):
            for n in range(1, order + 1):
                if i - n + 1 < 0:
                    break
                counts[n][(tuple(seq[i - n + 1 : i]), seq[i])] += 1

    hist_total = {n: Counter() for n in range(1, order + 1)}
    hist_types = {n: Counter() for n in range(1, order + 1)}
    for n in range(1, order + 1):
        for (h, _), c in counts[n].items():
            hist_total[n][h] += c
            hist_types[n][h] += 1

    tables = {n: {} for n in range(1, order + 1)}
    backoff = {}

    n_uni = hist_total[1][()]
    t_uni = hist_types[1][()]
    uni_counts = {w: c for ((_, w), c) in counts[1].items()}
    for w in predicted:
        p = (uni_counts.get(w, 0) + t_uni * math.exp(base)) / (n_uni + t_uni)
        tables[1][((), w)] = math.log(p)
    unk = math.log(t_uni * math.exp(base) / (n_uni + t_uni))

    for n in range(2, order + 1):
        for h in sorted(hist_total[n], key=_sort_key):
            c_h, t_h = hist_total[n][h], hist_types[n][h]
            backoff[h] = math.log(t_h / (c_h + t_h))
        for (h, w), c in sorted(counts[n].items(), key=lambda kv: (_sort_key(kv[0][0]), _sort_key(kv[0][1]))):
            c_h, t_h = hist_total[n][h], hist_types[n][h]
            p = (c + t_h * math.exp(_lookup(tables, backoff, unk, w, h[1:]))) / (c_h + t_h)
            tables[n][(h, w)] = math.log(p)
    return NGramLM(order, vocab_sorted, tables, backoff, unk)


def _tok_str(t):
    return t if isinstance(t, str) else str(t)


def _tok_parse(s):
    return s if s in (BOS, EOS) else int(s)


def write_arpa(lm: NGramLM, path):
    lines = [f"# unk_logprob {lm.unk_logprob!r}", "", "\\data\\"]
    n_counts = {1: len(lm.tables[1]) + 1}
    for n in range(2, lm.order + 1):
        n_counts[n] = len(lm.tables[n])
    for n in range(1, lm.order + 1):
        lines.append(f"ngram {n}={n_counts[n]}")
    for n in range(1, lm.order + 1):
        lines.append("")
        lines.append(f"\\{n}-grams:")
        rows = []
        if n == 1:
            rows.append(((BOS,), -99.0))
        for (h, w), lp in lm.tables[n].items():
            rows.append((h + (w,), lp / LOG10))
        rows.sort(key=lambda r: _sort_key(r[0]))
        for gram, lp10 in rows:
            text = f"{lp10!r}\t{' '.join(_tok_str(t) for t in gram)}"
            if n < lm.order and gram in lm.backoff:
                text += f"\t{lm.backoff[gram] / LOG10!r}"
            lines.append(text)
    lines += ["", "\\end\\", ""]
    atomic_write_bytes(path, "\n".join(lines).encode("utf-8"))


def read_arpa(path) -> NGramLM:
    tables = defaultdict(dict)
    backoff = {}
    unk = None
    order = 0
    section = None
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line.startswith("# unk_logprob"):
                unk = float(line.split()[-1])
                continue
            if not line:
                continue
            if line.startswith("ngram "):
                order = max(order, int(line.split()[1].split("=")[0]))
                continue
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:].split("-")[0])
                continue
            if line in ("\\data\\", "\\end\\"):
                continue
            if section is None:
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if "\t" in line:
                lp10, gram_text = float(parts[0]), parts[1]
                bo = float(parts[2]) if len(parts) > 2 else None
                gram = tuple(_tok_parse(t) for t in gram_text.split())
            else:
                lp10 = float(parts[0])
                gram = tuple(_tok_parse(t) for t in parts[1 : 1 + section])
                bo = float(parts[1 + section]) if len(parts) > 1 + section else None
            if bo is not None:
                backoff[gram] = bo * LOG10
            if gram == (BOS,):
                continue
            tables[section][(gram[:-1], gram[-1])] = lp10 * LOG10
    vocab = sorted(w for ((_, w)) in tables[1] if w != EOS)
    if unk is None:
        unk = min(tables[1].values())
    for n in range(1, order + 1):
        tables.setdefault(n, {})
    return NGramLM(order, vocab, dict(tables), backoff, unk)
