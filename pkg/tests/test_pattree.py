import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acoustic_patterns.labels import CorpusLabels, Token, UtteranceLabel
from acoustic_patterns.lexicon import Lexicon, WordPattern
from acoustic_patterns.pattree import (
    WordCandidate,
    build_pat_tree,
    entropy_bits,
    mine_candidates,
    relabel_with_candidates,
)

from conftest import mined_bruteforce, substring_counts


def singleton_labels(streams):
    utts = []
    for k, s in enumerate(streams):
        tokens = [Token(int(x), i, i + 1, (int(x),), [(i, i + 1)]) for i, x in enumerate(s)]
        utts.append(UtteranceLabel(f"u{k}", tokens))
    return CorpusLabels(tuple(utts))


def singleton_lexicon(n):
    return Lexicon([WordPattern(i, (i,)) for i in range(n)], n)


def cands(*seqs):
    return [WordCandidate(tuple(s), 1, 0.0, 0.0) for s in seqs]


class TestCounts:
    def test_overlapping(self):
        t = build_pat_tree([[1, 1, 1]])
        assert t.count([1, 1]) == 2
        assert t.count([1]) == 3
        assert t.count([1, 1, 1]) == 1
        assert t.count([1, 1, 1, 1]) == 0

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=30))
    def test_full_sequence_once(self, seq):
        t = build_pat_tree([seq])
        assert t.count(seq) == 1
        assert t.count(seq + [99]) == 0

    def test_random_corpus(self):
        rng = np.random.default_rng(0)
        seqs = [list(rng.integers(0, 10, size=n)) for n in rng.integers(5, 40, size=25)]
        seqs[-1] = seqs[-1][: max(1, 500 - sum(len(s) for s in seqs[:-1]))]
        brute = substring_counts(seqs, 5)
        t = build_pat_tree(seqs)
        for g, c in brute.items():
            assert t.count(list(g)) == c
        assert t.count([]) == sum(len(s) for s in seqs)

    def test_no_cross_utterance_matches(self):
        t = build_pat_tree([[1, 2], [3, 4]])
        assert t.count([2, 3]) == 0

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 3), min_size=1, max_size=15), min_size=1, max_size=6))
    def test_structure(self, seqs):
        t = build_pat_tree(seqs)
        n = sum(len(s) for s in seqs)
        assert len(t) <= 2 * n + 1
        for node in t.nodes():
            if node.children:
                assert node is t.root or len(node.children) >= 2
                assert node.count == sum(c.count for c in node.children.values())

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_pat_tree([])


class TestMining:
    def test_deterministic_context_excluded(self):
        t = build_pat_tree([[1, 2, 3, 4]] * 10)
        assert all(c.subwords != (2, 3) for c in mine_candidates(t, min_count=1, min_entropy=0.5))
        got = {c.subwords: c for c in mine_candidates(t, min_count=1, min_entropy=0.0)}
        assert got[(2, 3)].left_entropy == 0.0 and got[(2, 3)].right_entropy == 0.0

    def test_one_bit_each_side(self):
        seqs = [[1, 2, 3, 4], [5, 2, 3, 6], [1, 2, 3, 6], [5, 2, 3, 4]] * 10
        got = {c.subwords: c for c in mine_candidates(build_pat_tree(seqs), min_count=5, min_entropy=1.0)}
        c = got[(2, 3)]
        assert c.count == 40
        assert c.left_entropy == pytest.approx(1.0) and c.right_entropy == pytest.approx(1.0)

    def test_min_count_too_high(self):
        assert mine_candidates(build_pat_tree([[1, 2, 1, 2]]), min_count=100, min_entropy=0.0) == []

    def test_order(self):
        seqs = [[0, 1, 2, 3], [4, 1, 2, 5], [0, 1, 2, 5], [9, 1, 2, 3]] * 3 + [[7, 8, 1, 2, 3, 6]]
        out = mine_candidates(build_pat_tree(seqs), min_count=1, min_entropy=0.0)
        keys = [(-c.count, -len(c.subwords), c.subwords) for c in out]
        assert keys == sorted(keys)

    def test_bad_thresholds(self):
        t = build_pat_tree([[1, 2]])
        with pytest.raises(ValueError):
            mine_candidates(t, min_len=1)
        with pytest.raises(ValueError):
            mine_candidates(t, min_len=4, max_len=3)
        with pytest.raises(ValueError):
            mine_candidates(t, min_count=-1)

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.lists(st.integers(0, 3), min_size=1, max_size=20), min_size=1, max_size=8),
        st.integers(1, 4),
        st.sampled_from([0.0, 0.5, 1.0]),
        st.integers(2, 4),
    )
    def test_matches_bruteforce(self, seqs, min_count, min_entropy, max_len):
        got = mine_candidates(build_pat_tree(seqs), min_count, min_entropy, 2, max_len)
        brute = mined_bruteforce(seqs, min_count, min_entropy, 2, max_len)
        assert {c.subwords for c in got} == set(brute)
        for c in got:
            cnt, hl, hr = brute[c.subwords]
            assert c.count == cnt
            assert c.left_entropy == pytest.approx(hl, abs=1e-12)
            assert c.right_entropy == pytest.approx(hr, abs=1e-12)

    def test_entropy_bits(self):
        from collections import Counter

        assert entropy_bits(Counter()) == 0.0
        assert entropy_bits(Counter({"a": 3})) == 0.0
        assert entropy_bits(Counter({"a": 1, "b": 1, "c": 1, "d": 1})) == pytest.approx(2.0)

    def test_candidate_dict(self):
        c = WordCandidate((1, 2), 4, 1.5, 0.5)
        assert WordCandidate.from_dict(c.to_dict()) == c


def min_token_split(stream, cand_set):
    """Fewest-token segmentation by dynamic programming (ties to the longest first piece)."""
    n = len(stream)
    best = [0] + [None] * n
    back = [0] * (n + 1)
    for j in range(1, n + 1):
        for i in range(j):
            piece = tuple(stream[i:j])
            if j - i > 1 and piece not in cand_set:
                continue
            if best[i] is None:
                continue
            v = best[i] + 1
            if best[j] is None or v < best[j]:
                best[j], back[j] = v, i
    out, j = [], n
    while j > 0:
        out.append((back[j], j))
        j = back[j]
    return out[::-1]


class TestRelabel:
    def test_no_candidates(self):
        lab = singleton_labels([[0, 1, 2, 0]])
        out, lex = relabel_with_candidates(lab, [], singleton_lexicon(3))
        assert all(len(t.subwords) == 1 for t in out[0].tokens)
        assert len(lex) == 3

    def test_repeated_word(self):
        lab = singleton_labels([[1, 2, 3, 1, 2, 3]])
        out, lex = relabel_with_candidates(lab, cands((1, 2, 3)), singleton_lexicon(4))
        assert [t.subwords for t in out[0].tokens] == [(1, 2, 3), (1, 2, 3)]
        assert out[0].tokens[1].start == 3 and out[0].tokens[1].end == 6
        assert len(lex) == 5
        assert lex[out[0].tokens[0].word].count == 2

    def test_ids(self):
        lab = singleton_labels([[0, 1, 1, 2]])
        base = Lexicon([WordPattern(4, (0,)), WordPattern(9, (1,)), WordPattern(2, (2,)), WordPattern(11, (0, 1))], 3)
        out, lex = relabel_with_candidates(lab, cands((0, 1), (1, 2)), base)
        assert lex.id_of((0, 1)) == 11
        assert lex.id_of((0,)) == 4
        assert lex.id_of((1, 2)) == 12

    def test_outside_inventory(self):
        with pytest.raises(ValueError):
            relabel_with_candidates(singleton_labels([[0]]), cands((0, 5)), singleton_lexicon(2))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_greedy_matches_dp_when_unambiguous(self, seed):
        rng = np.random.default_rng(seed)
        # words over disjoint symbols, filler symbols used by no word
        words = [tuple(range(10 * k, 10 * k + int(rng.integers(2, 5)))) for k in range(1, 4)]
        fillers = [0, 1, 2]
        stream = []
        while len(stream) < 15:
            if rng.random() < 0.5:
                stream += list(words[int(rng.integers(3))])
            else:
                stream.append(int(rng.choice(fillers)))
        stream = stream[:20]
        lab = singleton_labels([stream])
        out, _ = relabel_with_candidates(lab, cands(*words), singleton_lexicon(40))
        got = [(t.start, t.end) for t in out[0].tokens]
        assert got == min_token_split(stream, set(words))

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.lists(st.integers(0, 4), min_size=1, max_size=12), min_size=1, max_size=5),
        st.lists(st.lists(st.integers(0, 4), min_size=2, max_size=4), max_size=4),
    )
    def test_stream_preserved(self, streams, cand_seqs):
        lab = singleton_labels(streams)
        cs = cands(*{tuple(c) for c in cand_seqs})
        out, lex = relabel_with_candidates(lab, cs, singleton_lexicon(5))
        for before, after in zip(lab, out):
            assert after.subword_stream == before.subword_stream
            assert after.subword_spans == before.subword_spans
        used = {t.subwords for u in out for t in u.tokens if len(t.subwords) > 1}
        assert len(lex) == len(used) + 5
        for u in out:
            for t in u.tokens:
                assert lex[t.word].subwords == t.subwords
