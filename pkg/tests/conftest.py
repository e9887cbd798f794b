"""Shared fixtures and brute-force oracles.

The oracles here never call the code under test for the quantity they
check: paths, segmentations and substrings are enumerated directly.
"""

from __future__ import annotations

import functools
import itertools
import math
from collections import Counter

import numpy as np
import pytest

from acoustic_patterns.hmm import HMMSet, SubwordHMM
from acoustic_patterns.synth import SynthSpec, generate


# ------------------------------------------------------------ fixtures


@pytest.fixture(scope="session")
def small_corpus():
    """A quick 5-unit corpus with ground truth (40 utterances)."""
    return generate(SynthSpec(n_utterances=40, seed=3))


@pytest.fixture(scope="session")
def default_corpus():
    return generate(SynthSpec())


def random_hmms(rng, n_models, n_states, dim, spread=2.0):
    models = {}
    for m in range(n_models):
        p_self = rng.uniform(0.1, 0.9, size=n_states)
        models[m] = SubwordHMM(
            m,
            rng.normal(0.0, spread, size=(n_states, dim)),
            rng.uniform(0.3, 2.0, size=(n_states, dim)),
            np.log(p_self),
            np.log1p(-p_self),
        )
    return HMMSet(models, dim, n_states)


# ------------------------------------------------------------ Viterbi oracles


def log_gauss(x, mean, var):
    return float(-0.5 * np.sum(np.log(2 * np.pi * var) + (x - mean) ** 2 / var))


def compositions(total, parts):
    """All tuples of ``parts`` positive integers summing to ``total``."""
    if parts == 0:
        if total == 0:
            yield ()
        return
    for cut in itertools.combinations(range(1, total), parts - 1):
        bounds = (0, *cut, total)
        yield tuple(b - a for a, b in zip(bounds[:-1], bounds[1:]))


def chain_score_bruteforce(frames, chain):
    """Best score over every state-duration assignment of a left-to-right chain.

    ``chain`` is a list of (mean, var, log_self, log_next) per state; every
    state takes at least one frame and the exit transition is paid.
    """
    T, N = len(frames), len(chain)
    if T < N:
        return -math.inf
    best = -math.inf
    for durs in compositions(T, N):
        t = 0
        s = 0.0
        for (mean, var, ls, ln), d in zip(chain, durs):
            for _ in range(d):
                s += log_gauss(frames[t], mean, var)
                t += 1
            s += (d - 1) * ls + ln
        best = max(best, s)
    return best


def hmm_chain(hmms: HMMSet, subwords):
    out = []
    for sid in subwords:
        m = hmms[sid]
        for j in range(hmms.n_states):
            out.append((m.means[j], m.vars[j], m.log_self[j], m.log_next[j]))
    return out


def decode_bruteforce(frames, hmms, lex, lm=None, lm_scale=0.0, wip=0.0):
    """Best total score over every segmentation of the frames into lexicon words.

    Segment scores enumerate every state-duration assignment. The best
    continuation from (position, previous word) is memoised, which is exact
    because the score is a sum of per-word terms under a bigram LM.
    """
    T = len(frames)
    words = sorted(lex.ids)

    @functools.lru_cache(maxsize=None)
    def seg(w, a, b):
        return chain_score_bruteforce(frames[a:b], hmm_chain(hmms, lex[w].subwords))

    @functools.lru_cache(maxsize=None)
    def best_from(pos, prev):
        if pos == T:
            return lm_scale * lm.logprob("</s>", (prev,)) if lm is not None else 0.0
        best = -math.inf
        for w in words:
            lm_term = lm_scale * lm.logprob(w, (prev,)) if lm is not None else 0.0
            for b in range(pos + 1, T + 1):
                s = seg(w, pos, b)
                if s == -math.inf:
                    continue
                best = max(best, s + wip + lm_term + best_from(b, w))
        return best

    return best_from(0, "<s>")


# ------------------------------------------------------------ substring oracles


def substring_counts(seqs, max_n):
    c = Counter()
    for s in seqs:
        for n in range(1, max_n + 1):
            for i in range(len(s) - n + 1):
                c[tuple(s[i : i + n])] += 1
    return c


def entropy(counter):
    total = sum(counter.values())
    return -sum(v / total * math.log2(v / total) for v in counter.values() if v) if total else 0.0


def mined_bruteforce(seqs, min_count, min_entropy, min_len, max_len):
    """{subwords: (count, left entropy, right entropy)} by direct scanning."""
    left, right, count = {}, {}, Counter()
    for s in seqs:
        for n in range(min_len, max_len + 1):
            for i in range(len(s) - n + 1):
                g = tuple(s[i : i + n])
                count[g] += 1
                left.setdefault(g, Counter())[s[i - 1] if i > 0 else "<s>"] += 1
                right.setdefault(g, Counter())[s[i + n] if i + n < len(s) else "</s>"] += 1
    out = {}
    for g, c in count.items():
        if c < max(min_count, 1):
            continue
        hl, hr = entropy(left[g]), entropy(right[g])
        if hl >= min_entropy and hr >= min_entropy:
            out[g] = (c, hl, hr)
    return out


# ------------------------------------------------------------ DTW oracles


def monotone_paths(n, m):
    """Every path from (0,0) to (n-1,m-1) with steps (1,0), (0,1), (1,1)."""
    def rec(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                for rest in rec(a, b):
                    yield [(i, j)] + rest
    return list(rec(0, 0))


def mean_path_cost_bruteforce(c):
    n, m = c.shape
    return min(sum(c[i, j] for i, j in p) / len(p) for p in monotone_paths(n, m))


def subsequence_cost_bruteforce(c):
    """Query rows fully aligned to any contiguous column range, summing pair costs."""
    n, m = c.shape
    best = math.inf
    for s in range(m):
        for e in range(s, m):
            for p in monotone_paths(n, e - s + 1):
                best = min(best, sum(c[i, s + j] for i, j in p))
    return best
