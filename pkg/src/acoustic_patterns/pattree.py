"""Frequency and branching-entropy index over subword-ID sequences.

The index is a compressed suffix trie: every suffix of every sequence is
inserted, each sequence ends in its own sentinel so no path crosses an
utterance boundary, and unary chains are collapsed into single edges. A
node's count is the number of occurrences of the string spelled by the
path to it. Left-context counts are kept per node; right contexts are read
off the children.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .labels import CorpusLabels, Token, UtteranceLabel
from .lexicon import Lexicon, WordPattern

# context symbols for "no token on this side"
START = "<s>"
END = "</s>"


class _Sentinel:
    """End-of-sequence marker, unique per sequence and never equal to a token."""

    __slots__ = ("index",)

    def __init__(self, index):
        self.index = index

    def __repr__(self):
        return f"$({self.index})"


class _Node:
    __slots__ = ("start", "end", "children", "count", "left")

    def __init__(self, start, end):
        # edge label is text[start:end]
        self.start = start
        self.end = end
        self.children = {}
        self.count = 0
        self.left = Counter()


class PatTree:
    def __init__(self, sequences):
        sequences = [list(s) for s in sequences]
        if not sequences:
            raise ValueError("no sequences")
        text = []
        starts = []
        for i, seq in enumerate(sequences):
            starts.append(len(text))
            text.extend(seq)
            text.append(_Sentinel(i))
        self.text = text
        self.n_tokens = sum(len(s) for s in sequences)
        self.root = _Node(0, 0)
        for s0, seq in zip(starts, sequences):
            for k in range(len(seq)):
                self._insert(s0 + k, seq[k - 1] if k > 0 else START)

    def _insert(self, pos, left_sym):
        text = self.text
        node = self.root
        node.count += 1
        while True:
            child = node.children.get(text[pos])
            if child is None:
                leaf = _Node(pos, self._sentinel_end(pos))
                leaf.count = 1
                leaf.left[left_sym] += 1
                node.children[text[pos]] = leaf
                return
            # walk the edge
            k = 0
            length = child.end - child.start
            while k < length and text[child.start + k] == text[pos + k]:
                k += 1
            if k < length:
                mid = _Node(child.start, child.start + k)
                mid.count = child.count
                mid.left = Counter(child.left)
                child.start += k
                mid.children[text[child.start]] = child
                node.children[text[mid.start]] = mid
                child = mid
            child.count += 1
            child.left[left_sym] += 1
            node = child
            pos += k

    def _sentinel_end(self, pos):
        while not isinstance(self.text[pos], _Sentinel):
            pos += 1
        return pos + 1

    # ------------------------------------------------------------ queries

    def _locate(self, pattern):
        """(node, depth into its edge) where ``pattern`` ends, or None if absent."""
        node = self.root
        i = 0
        pattern = list(pattern)
        while i < len(pattern):
            child = node.children.get(pattern[i])
            if child is None:
                return None
            k = 0
            length = child.end - child.start
            while k < length and i < len(pattern):
                if self.text[child.start + k] != pattern[i]:
                    return None
                k += 1
                i += 1
            node = child
            if i == len(pattern):
                return node, k
        return node, node.end - node.start

    def count(self, pattern):
        if len(pattern) == 0:
            return self.n_tokens
        hit = self._locate(pattern)
        return 0 if hit is None else hit[0].count

    def left_contexts(self, pattern):
        hit = self._locate(pattern)
        return Counter() if hit is None else Counter(hit[0].left)

    def right_contexts(self, pattern):
        hit = self._locate(pattern)
        if hit is None:
            return Counter()
        node, k = hit
        return self._right_of(node, k)

    def _right_of(self, node, k):
        if k < node.end - node.start:
            sym = self.text[node.start + k]
            return Counter({END if isinstance(sym, _Sentinel) else sym: node.count})
        out = Counter()
        for sym, child in node.children.items():
            out[END if isinstance(sym, _Sentinel) else sym] += child.count
        return out

    def nodes(self):
        stack = [self.root]
        while stack:
            n = stack.pop()
            yield n
            stack.extend(n.children.values())

    def __len__(self):
        return sum(1 for _ in self.nodes())


def build_pat_tree(sequences) -> PatTree:
    return PatTree(sequences)


@dataclass(frozen=True)
class WordCandidate:
    subwords: tuple
    count: int
    left_entropy: float
    right_entropy: float

    def __post_init__(self):
        object.__setattr__(self, "subwords", tuple(int(s) for s in self.subwords))

    def to_dict(self):
        return {
            "subwords": list(self.subwords),
            "count": self.count,
            "left_entropy": self.left_entropy,
            "right_entropy": self.right_entropy,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["subwords"]), int(d["count"]), float(d["left_entropy"]), float(d["right_entropy"]))


def entropy_bits(counts) -> float:
    total = sum(counts.values())
    if total == 0:
        return 0.0
    h = 0.0
    for c in counts.values():
        if c > 0:
            p = c / total
            h -= p * math.log2(p)
    return max(h, 0.0)


def mine_candidates(tree: PatTree, min_count=5, min_entropy=1.0, min_len=2, max_len=8):
    """Frequent strings whose left and right branching entropies both reach ``min_entropy``.

    Sorted by count (descending), then length (descending), then the
    subword sequence itself.
    """
    if min_count < 0 or min_entropy < 0:
        raise ValueError("thresholds must be >= 0")
    if not 2 <= min_len <= max_len:
        raise ValueError("need 2 <= min_len <= max_len")
    out = []
    # (node, depth of the path above node's edge, path tokens above the edge)
    stack = [(child, 0, ()) for child in tree.root.children.values()]
    text = tree.text
    while stack:
        node, above, prefix = stack.pop()
        if node.count < max(min_count, 1):
            continue
        edge = text[node.start : node.end]
        path = prefix
        for k, sym in enumerate(edge, 1):
            if isinstance(sym, _Sentinel):
                break
            path = path + (sym,)
            L = above + k
            if L > max_len:
                break
            if L < min_len:
                continue
            right = tree._right_of(node, k)
            hr = entropy_bits(right)
            if hr < min_entropy:
                continue
            hl = entropy_bits(node.left)
            if hl < min_entropy:
                continue
            out.append(WordCandidate(path, node.count, hl, hr))
        else:
            depth = above + len(edge)
            if depth < max_len:
                stack.extend((c, depth, path) for c in node.children.values())
    out.sort(key=lambda c: (-c.count, -len(c.subwords), c.subwords))
    return out


def _greedy_split(stream, cand_set, max_len):
    """Greedy longest match; returns [(start, end)] index pairs into ``stream``."""
    i = 0
    out = []
    n = len(stream)
    while i < n:
        step = 1
        for L in range(min(max_len, n - i), 1, -1):
            if tuple(stream[i : i + L]) in cand_set:
                step = L
                break
        out.append((i, i + step))
        i += step
    return out


def relabel_with_candidates(labels: CorpusLabels, cands, lex: Lexicon):
    """Re-tokenize every subword stream by greedy longest match over ``cands``.

    Subwords not covered by a candidate become singleton tokens. Candidate
    and singleton ids are reused from ``lex`` where it already has the same
    sequence; new multi-subword patterns get ids above every id in use.
    Returns the new labels and a lexicon of the used candidates plus one
    singleton per subword pattern in the inventory.
    """
    inventory = lex.subword_inventory_size
    cand_set = {tuple(c.subwords) for c in cands}
    for seq in cand_set:
        if any(not 0 <= s < inventory for s in seq):
            raise ValueError(f"candidate {seq} uses subwords outside the inventory")
    max_len = max((len(c) for c in cand_set), default=1)
    next_id = max([lex.max_id()] + labels.word_ids()) + 1
    ids = {}

    def id_for(seq):
        nonlocal next_id
        if seq not in ids:
            known = lex.id_of(seq)
            if known is None:
                known = next_id
                next_id += 1
            ids[seq] = known
        return ids[seq]

    # singletons take their lexicon ids first so the numbering is stable
    singleton_ids = {}
    for s in range(inventory):
        known = lex.id_of((s,))
        if known is None:
            known = next_id
            next_id += 1
        singleton_ids[(s,)] = known
    ids.update(singleton_ids)

    counts = Counter()
    utts = []
    for u in labels:
        stream = u.subword_stream
        spans = u.subword_spans
        tokens = []
        for a, b in _greedy_split(stream, cand_set, max_len):
            seq = tuple(stream[a:b])
            wid = id_for(seq)
            counts[seq] += 1
            tokens.append(Token(wid, spans[a][0], spans[b - 1][1], seq, spans[a:b]))
        utts.append(UtteranceLabel(u.utterance_id, tokens))
    entries = [WordPattern(wid, seq, counts[seq]) for seq, wid in ids.items()]
    entries.sort(key=lambda e: e.id)
    return CorpusLabels(tuple(utts)), Lexicon(tuple(entries), inventory)
