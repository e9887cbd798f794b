"""Lexicon-constrained free-word Viterbi decoding.

All lexicon words are laid out as one flat array of HMM states (each word is
the concatenation of its subword chains). Tokens move inside a word through
self-loops and next-state transitions; a token leaving a word's last state
may enter the first state of any word, paying the word insertion penalty
and, when an LM is used, the scaled bigram log probability.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import partial

import numpy as np
from numba import njit

from .hmm import Alignment, HMMSet, log_gaussian
from .labels import CorpusLabels, Token, UtteranceLabel
from .lexicon import Lexicon
from .ngram import BOS, EOS, NGramLM
from .parallel import pmap

log = logging.getLogger(__name__)


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    lm_scale: float = 5.0
    word_insertion_penalty: float = -2.0
    # log-probability band below the unpruned best score of each frame; 0 keeps every hypothesis
    beam: float = 0.0
    use_lm: bool = True

    def __post_init__(self):
        if self.beam < 0:
            raise ValueError("beam must be >= 0")
        if self.lm_scale < 0:
            raise ValueError("lm_scale must be >= 0")


@dataclass(frozen=True)
class DecodeResult:
    tokens: UtteranceLabel
    total_log_score: float
    alignment: Alignment


class DecodeGraph:
    """Flattened state layout of a lexicon plus word-transition scores."""

    def __init__(self, hmms: HMMSet, lex: Lexicon, lm: NGramLM | None = None, cfg: DecodeConfig = DecodeConfig()):
        S = hmms.n_states
        self.hmms = hmms
        self.word_ids = sorted(lex.ids)
        self.subwords = [lex[w].subwords for w in self.word_ids]
        missing = {s for seq in self.subwords for s in seq} - set(hmms.ids)
        if missing:
            raise ValueError(f"lexicon uses subwords without models: {sorted(missing)}")
        chains = [hmms.chain_index(seq) for seq in self.subwords]
        lengths = np.array([len(c) for c in chains], dtype=np.int64)
        self.gidx = np.concatenate(chains).astype(np.int64)
        self.lself = hmms.log_self[self.gidx]
        self.lnext = hmms.log_next[self.gidx]
        self.wend = np.cumsum(lengths) - 1
        self.wstart = self.wend - lengths + 1
        self.word_of = np.repeat(np.arange(len(chains)), lengths)
        self.is_first = np.zeros(len(self.gidx), dtype=np.bool_)
        self.is_first[self.wstart] = True
        self.pos_in_word = np.arange(len(self.gidx)) - self.wstart[self.word_of]
        self.state_of = self.pos_in_word % S
        self.occ_of = self.pos_in_word // S
        self.min_frames = int(lengths.min())

        W = len(self.word_ids)
        entry = np.full((W + 1, W), cfg.word_insertion_penalty)
        final = np.zeros(W)
        if cfg.use_lm and lm is not None:
            if lm.order > 2:
                raise ValueError("the decoder applies at most a bigram LM")
            contexts = list(self.word_ids) + [BOS]
            for i, e in enumerate(contexts):
                hist = (e,)
                for j, w in enumerate(self.word_ids):
                    entry[i, j] += cfg.lm_scale * lm.logprob(w, hist)
                if i < W:
                    final[i] = cfg.lm_scale * lm.logprob(EOS, hist)
        self.entry = entry
        self.final = final


@njit(cache=True)
def _step(t, delta, new, enter, em, gidx, lself, lnext, word_of, is_first, wend, entry, code, came_from):
    """Advance ``delta`` by one frame; back-pointers go to row ``t`` of ``code`` and ``came_from``."""
    N = gidx.shape[0]
    W = wend.shape[0]
    for w in range(W):
        enter[w] = -np.inf
    for e in range(W):
        x = delta[wend[e]] + lnext[wend[e]]
        if x == -np.inf:
            continue
        for w in range(W):
            v = x + entry[e, w]
            if v > enter[w]:
                enter[w] = v
                came_from[t, w] = e
    for n in range(N):
        best = delta[n] + lself[n]
        c = 0
        if is_first[n]:
            v = enter[word_of[n]]
            if v > best:
                best = v
                c = 2
        else:
            v = delta[n - 1] + lnext[n - 1]
            if v > best:
                best = v
                c = 1
        new[n] = best + em[t, gidx[n]]
        code[t, n] = c
    for n in range(N):
        delta[n] = new[n]


@njit(cache=True)
def _token_passing(em, gidx, lself, lnext, word_of, is_first, wstart, wend, entry, final, beam):
    T = em.shape[0]
    N = gidx.shape[0]
    W = wstart.shape[0]
    delta = np.full(N, -np.inf)
    new = np.empty(N)
    enter = np.empty(W)
    # 0 = self-loop, 1 = from previous state, 2 = word entry
    code = np.zeros((T, N), dtype=np.uint8)
    came_from = np.full((T, W), -1, dtype=np.int64)
    for w in range(W):
        n = wstart[w]
        delta[n] = entry[W, w] + em[0, gidx[n]]
        came_from[0, w] = W
    # the band is measured from the unpruned frame best, which does not
    # depend on the beam, so a wider beam keeps a superset of tokens
    ref = delta.copy()
    ref_code = np.zeros((2, N), dtype=np.uint8)
    ref_came = np.full((2, W), -1, dtype=np.int64)
    if beam > 0:
        _prune(delta, _max(ref) - beam)
    for t in range(1, T):
        _step(t, delta, new, enter, em, gidx, lself, lnext, word_of, is_first, wend, entry, code, came_from)
        if beam > 0:
            _step(1, ref, new, enter, em, gidx, lself, lnext, word_of, is_first, wend, entry, ref_code, ref_came)
            _prune(delta, _max(ref) - beam)
    best = -np.inf
    last = -1
    for e in range(W):
        v = delta[wend[e]] + lnext[wend[e]] + final[e]
        if v > best:
            best = v
            last = e
    path = np.full(T, -1, dtype=np.int64)
    entered = np.zeros(T, dtype=np.bool_)
    if last < 0:
        return best, path, entered
    n = wend[last]
    for t in range(T - 1, -1, -1):
        path[t] = n
        if t == 0:
            entered[0] = True
            break
        c = code[t, n]
        if c == 1:
            n -= 1
        elif c == 2:
            entered[t] = True
            n = wend[came_from[t, word_of[n]]]
    return best, path, entered


@njit(cache=True)
def _max(x):
    m = -np.inf
    for v in x:
        if v > m:
            m = v
    return m


@njit(cache=True)
def _prune(delta, cut):
    for n in range(delta.shape[0]):
        if delta[n] < cut:
            delta[n] = -np.inf


def decode_utterance(features, hmms: HMMSet, lex: Lexicon, lm: NGramLM | None = None, cfg: DecodeConfig = DecodeConfig(), graph: DecodeGraph | None = None) -> DecodeResult:
    """Best token sequence for one utterance (exact when ``cfg.beam == 0``)."""
    if graph is None:
        graph = DecodeGraph(hmms, lex, lm, cfg)
    frames = features.frames
    T = len(frames)
    if T < graph.min_frames:
        raise DecodeError(f"{features.utterance_id}: {T} frames, shortest lexicon word needs {graph.min_frames}")
    em = log_gaussian(frames, hmms.means, hmms.vars)
    score, path, entered = _token_passing(
        em, graph.gidx, graph.lself, graph.lnext, graph.word_of, graph.is_first,
        graph.wstart, graph.wend, graph.entry, graph.final, float(cfg.beam),
    )
    if path[0] < 0 or not np.isfinite(score):
        raise DecodeError(f"{features.utterance_id}: no surviving path")
    return _result_from_path(graph, features.utterance_id, float(score), path, entered)


def _result_from_path(graph: DecodeGraph, uid, score, path, entered):
    T = len(path)
    starts = np.flatnonzero(entered).tolist() + [T]
    word_index = np.cumsum(entered) - 1
    occ = graph.occ_of[path]
    tokens = []
    for k in range(len(starts) - 1):
        a, b = starts[k], starts[k + 1]
        w = graph.word_of[path[a]]
        seq = graph.subwords[w]
        cuts = [a] + (a + np.flatnonzero(np.diff(occ[a:b])) + 1).tolist() + [b]
        spans = list(zip(cuts[:-1], cuts[1:]))
        tokens.append(Token(graph.word_ids[w], a, b, seq, spans))
    sub = np.array([graph.subwords[graph.word_of[n]][graph.occ_of[n]] for n in path], dtype=np.int64)
    # occurrence index along the whole utterance
    global_occ = np.concatenate([[0], np.cumsum((np.diff(occ) != 0) | entered[1:])])
    ali = Alignment(word_index, sub, graph.state_of[path], global_occ)
    return DecodeResult(UtteranceLabel(uid, tokens), score, ali)


def _decode_job(features, hmms, lex, lm, cfg, graph):
    try:
        return decode_utterance(features, hmms, lex, lm, cfg, graph)
    except DecodeError as exc:
        return str(exc)


def decode_corpus(corpus, hmms: HMMSet, lex: Lexicon, lm: NGramLM | None = None, cfg: DecodeConfig = DecodeConfig(), workers=None, failures: list | None = None) -> CorpusLabels:
    """Decode every utterance, preserving corpus order.

    Utterances that cannot be decoded are left out of the result; their
    ids and messages are appended to ``failures`` when given.
    """
    if len(corpus) == 0:
        return CorpusLabels(())
    graph = DecodeGraph(hmms, lex, lm, cfg)
    results = pmap(partial(_decode_job, hmms=hmms, lex=lex, lm=lm, cfg=cfg, graph=graph), list(corpus), workers)
    utts = []
    for f, r in zip(corpus, results):
        if isinstance(r, str):
            log.warning("decode failed: %s", r)
            if failures is not None:
                failures.append((f.utterance_id, r))
            continue
        utts.append(r.tokens)
    return CorpusLabels(tuple(utts))
