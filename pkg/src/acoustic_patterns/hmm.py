"""Left-to-right single-Gaussian HMMs for subword-like patterns.

Every model has the same number of states, each with one diagonal
Gaussian, a self-loop and a transition to the next state (no skips). The
last state's "next" transition is the model exit, and it is scored: a path
through a chain of models pays for every transition it takes, including
the final exit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from numba import njit

from .corpus import FeatureCorpus
from .labels import CorpusLabels, write_json
from .parallel import pmap

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class AlignmentError(ValueError):
    """The utterance has fewer frames than the chain has states."""


@dataclass(frozen=True)
class HMMConfig:
    n_states: int = 13
    em_iters: int = 5
    var_floor_scale: float = 1e-3
    # transition probabilities are kept inside [trans_floor, 1 - trans_floor]
    trans_floor: float = 1e-3


@dataclass(frozen=True)
class GaussianState:
    mean: np.ndarray
    var: np.ndarray

    @property
    def log_norm_const(self):
        return -0.5 * (len(self.mean) * LOG_2PI + float(np.sum(np.log(self.var))))

    def log_pdf(self, x):
        x = np.atleast_2d(x)
        return self.log_norm_const - 0.5 * np.sum((x - self.mean) ** 2 / self.var, axis=1)


@dataclass
class SubwordHMM:
    id: int
    means: np.ndarray
    vars: np.ndarray
    log_self: np.ndarray
    log_next: np.ndarray

    @property
    def n_states(self):
        return self.means.shape[0]

    @property
    def states(self):
        return [GaussianState(m, v) for m, v in zip(self.means, self.vars)]

    def copy(self):
        return SubwordHMM(self.id, self.means.copy(), self.vars.copy(), self.log_self.copy(), self.log_next.copy())


class HMMSet:
    """Subword HMMs keyed by pattern id, sharing dimension and state count."""

    def __init__(self, models, feature_dim, n_states, var_floor=None, untrained=()):
        self.models = dict(sorted(models.items()))
        self.feature_dim = int(feature_dim)
        self.n_states = int(n_states)
        self.var_floor = None if var_floor is None else np.asarray(var_floor, dtype=np.float64)
        self.untrained = frozenset(untrained)
        for m in self.models.values():
            if m.means.shape != (self.n_states, self.feature_dim):
                raise ValueError(f"model {m.id}: shape {m.means.shape} != ({self.n_states}, {self.feature_dim})")
        self._refresh()

    def _refresh(self):
        self.ids = list(self.models)
        self.row_of = {mid: i for i, mid in enumerate(self.ids)}
        if self.models:
            self.means = np.concatenate([m.means for m in self.models.values()])
            self.vars = np.concatenate([m.vars for m in self.models.values()])
            self.log_self = np.concatenate([m.log_self for m in self.models.values()])
            self.log_next = np.concatenate([m.log_next for m in self.models.values()])
        else:
            self.means = self.vars = np.zeros((0, self.feature_dim))
            self.log_self = self.log_next = np.zeros(0)

    def __len__(self):
        return len(self.models)

    def __getitem__(self, mid):
        return self.models[mid]

    def __contains__(self, mid):
        return mid in self.models

    def gaussian_index(self, subword_id, state):
        return self.row_of[subword_id] * self.n_states + state

    def chain_index(self, subwords):
        """Gaussian rows of the concatenated state chain for a subword sequence."""
        S = self.n_states
        return np.concatenate([self.row_of[s] * S + np.arange(S) for s in subwords])

    def emissions(self, frames):
        """Log-likelihood of every frame under every state, shape (n_frames, n_models * n_states)."""
        return log_gaussian(frames, self.means, self.vars)

    def copy(self):
        return HMMSet({k: m.copy() for k, m in self.models.items()}, self.feature_dim, self.n_states, self.var_floor, self.untrained)

    def to_dict(self):
        return {
            "feature_dim": self.feature_dim,
            "states_per_model": self.n_states,
            "var_floor": None if self.var_floor is None else self.var_floor.tolist(),
            "models": [
                {
                    "id": m.id,
                    "means": m.means.tolist(),
                    "vars": m.vars.tolist(),
                    "log_self": m.log_self.tolist(),
                    "log_next": m.log_next.tolist(),
                }
                for m in self.models.values()
            ],
        }

    @classmethod
    def from_dict(cls, d):
        models = {}
        for m in d["models"]:
            models[int(m["id"])] = SubwordHMM(
                int(m["id"]),
                np.asarray(m["means"], dtype=np.float64),
                np.asarray(m["vars"], dtype=np.float64),
                np.asarray(m["log_self"], dtype=np.float64),
                np.asarray(m["log_next"], dtype=np.float64),
            )
        return cls(models, d["feature_dim"], d["states_per_model"], d.get("var_floor"))


def save_hmms(hmms: HMMSet, path):
    write_json(hmms.to_dict(), path)


def load_hmms(path) -> HMMSet:
    with open(path, encoding="utf-8") as fh:
        return HMMSet.from_dict(json.load(fh))


def log_gaussian(frames, means, vars):
    frames = np.asarray(frames, dtype=np.float64)
    norm = -0.5 * (means.shape[1] * LOG_2PI + np.sum(np.log(vars), axis=1))
    diff = frames[:, None, :] - means[None, :, :]
    return norm[None, :] - 0.5 * np.sum(diff * diff / vars[None, :, :], axis=2)


def _transition_logs(p_self, floor):
    p = min(max(p_self, floor), 1.0 - floor)
    return math.log(p), math.log1p(-p)


@njit(cache=True)
def chain_viterbi(em, log_self, log_next):
    """Best path through a left-to-right chain that must start in state 0
    and exit from the last state after the final frame.

    Returns (score, state index per frame). Ties prefer staying in a state.
    """
    T, N = em.shape
    delta = np.full(N, -np.inf)
    delta[0] = em[0, 0]
    moved = np.zeros((T, N), dtype=np.uint8)
    new = np.empty(N)
    for t in range(1, T):
        lo = max(0, N - (T - t))
        hi = min(N, t + 1)
        for j in range(N):
            new[j] = -np.inf
        for j in range(lo, hi):
            best = delta[j] + log_self[j]
            if j > 0:
                mv = delta[j - 1] + log_next[j - 1]
                if mv > best:
                    best = mv
                    moved[t, j] = 1
            new[j] = best + em[t, j]
        for j in range(N):
            delta[j] = new[j]
    score = delta[N - 1] + log_next[N - 1]
    path = np.empty(T, dtype=np.int64)
    j = N - 1
    for t in range(T - 1, -1, -1):
        path[t] = j
        if moved[t, j] == 1:
            j -= 1
    return score, path


@dataclass
class Alignment:
    """Per-frame (word token index, subword id, state index).

    ``occurrence`` numbers the subword occurrences along the chain, so
    repeated subwords stay distinguishable.
    """

    word_index: np.ndarray
    subword: np.ndarray
    state: np.ndarray
    occurrence: np.ndarray

    def __len__(self):
        return len(self.state)

    def subword_spans(self):
        """(word_index, subword, start, end) per subword occurrence, in time order."""
        cuts = np.flatnonzero(np.diff(self.occurrence)) + 1
        bounds = [0, *cuts.tolist(), len(self.occurrence)]
        return [
            (int(self.word_index[a]), int(self.subword[a]), a, b)
            for a, b in zip(bounds[:-1], bounds[1:])
        ]


def _align_chain(frames, subwords, hmms: HMMSet):
    idx = hmms.chain_index(subwords)
    if len(frames) < len(idx):
        raise AlignmentError(f"{len(frames)} frames cannot fill a chain of {len(idx)} states")
    em = log_gaussian(frames, hmms.means[idx], hmms.vars[idx])
    score, path = chain_viterbi(em, hmms.log_self[idx], hmms.log_next[idx])
    return float(score), idx[path], path


def force_align(features, word_tokens, hmms: HMMSet, lexicon=None):
    """Viterbi alignment of an utterance to a known token sequence.

    ``word_tokens`` are word-pattern ids looked up in ``lexicon``, or, with
    no lexicon, subword-id sequences. Returns ``(Alignment, log_likelihood)``.
    """
    frames = features.frames if hasattr(features, "frames") else np.asarray(features, dtype=np.float64)
    seqs = [lexicon[w].subwords for w in word_tokens] if lexicon is not None else [tuple(w) for w in word_tokens]
    flat = [s for seq in seqs for s in seq]
    word_of = np.repeat(np.arange(len(seqs)), [len(s) * hmms.n_states for s in seqs])
    sub_of = np.repeat(np.asarray(flat, dtype=np.int64), hmms.n_states)
    score, _, path = _align_chain(frames, flat, hmms)
    S = hmms.n_states
    ali = Alignment(word_of[path], sub_of[path], path % S, path // S)
    return ali, score


# ---------------------------------------------------------------- training


def global_stats(corpus: FeatureCorpus):
    x = corpus.stacked()
    return x.mean(axis=0), x.var(axis=0)


def init_hmms_from_labels(corpus: FeatureCorpus, labels: CorpusLabels, cfg: HMMConfig = HMMConfig(), n_subwords=None) -> HMMSet:
    """Flat start: split each subword segment evenly across the states.

    Patterns that never occur are given the global mean and variance and
    listed in ``HMMSet.untrained``.
    """
    S = cfg.n_states
    gmean, gvar = global_stats(corpus)
    floor = cfg.var_floor_scale * np.maximum(gvar, 1e-12)
    D = len(gmean)
    ids = labels.subword_ids()
    if n_subwords is not None:
        ids = sorted(set(ids) | set(range(n_subwords)))
    acc_n = {i: np.zeros(S) for i in ids}
    acc_x = {i: np.zeros((S, D)) for i in ids}
    acc_xx = {i: np.zeros((S, D)) for i in ids}
    n_frames = dict.fromkeys(ids, 0)
    n_segs = dict.fromkeys(ids, 0)
    by_id = {u.utterance_id: u for u in corpus}
    for u in labels:
        frames = by_id[u.utterance_id].frames
        for s, (a, b) in zip(u.subword_stream, u.subword_spans):
            seg = frames[a:b]
            n = b - a
            n_frames[s] += n
            n_segs[s] += 1
            if n >= S:
                states = (np.arange(n) * S) // n
                np.add.at(acc_n[s], states, 1.0)
                np.add.at(acc_x[s], states, seg)
                np.add.at(acc_xx[s], states, seg * seg)
            else:
                pick = (np.arange(S) * n) // S
                acc_n[s] += 1.0
                acc_x[s] += seg[pick]
                acc_xx[s] += seg[pick] ** 2

    models = {}
    untrained = []
    for i in ids:
        if n_segs[i] == 0:
            untrained.append(i)
            means = np.tile(gmean, (S, 1))
            vars_ = np.tile(np.maximum(gvar, floor), (S, 1))
            ls, ln = _transition_logs(0.5, cfg.trans_floor)
        else:
            cnt = acc_n[i][:, None]
            means = acc_x[i] / cnt
            vars_ = np.maximum(acc_xx[i] / cnt - means**2, floor)
            avg_dur = n_frames[i] / (S * n_segs[i])
            ls, ln = _transition_logs(1.0 - 1.0 / avg_dur, cfg.trans_floor)
        models[i] = SubwordHMM(i, means, vars_, np.full(S, ls), np.full(S, ln))
    if untrained:
        log.warning("patterns with no occurrences, initialised from global statistics: %s", untrained)
    return HMMSet(models, D, S, floor, untrained)


@dataclass
class TrainReport:
    logliks: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


def _align_job(job, hmms):
    frames, subwords = job
    try:
        score, gidx, path = _align_chain(frames, subwords, hmms)
    except AlignmentError:
        return None
    return score, gidx, path


def _e_step(jobs, hmms, workers):
    return pmap(partial(_align_job, hmms=hmms), jobs, workers)


def train_hmms(corpus, labels, hmms: HMMSet, cfg: HMMConfig = HMMConfig(), report: TrainReport | None = None, workers=None) -> HMMSet:
    """Viterbi-style EM: align each utterance to its labelled subword chain,
    then re-estimate Gaussians and transitions from the aligned frames.

    The corpus log-likelihood recorded in ``report.logliks`` (one value per
    round plus one after the last update) never decreases: each M-step is
    the exact maximiser under the variance and transition floors.
    """
    hmms = hmms.copy()
    floor = hmms.var_floor
    if floor is None:
        floor = cfg.var_floor_scale * np.maximum(global_stats(corpus)[1], 1e-12)
        hmms.var_floor = floor
    by_id = {u.utterance_id: u for u in corpus}
    jobs = [(by_id[u.utterance_id].frames, u.subword_stream) for u in labels]
    G = len(hmms.ids) * hmms.n_states
    D = hmms.feature_dim
    results = None
    for r in range(cfg.em_iters):
        results = _e_step(jobs, hmms, workers)
        n = np.zeros(G)
        visits = np.zeros(G)
        sx = np.zeros((G, D))
        sxx = np.zeros((G, D))
        total = 0.0
        skipped = []
        for (frames, _), u, res in zip(jobs, labels, results):
            if res is None:
                skipped.append(u.utterance_id)
                continue
            score, gidx, path = res
            total += score
            np.add.at(n, gidx, 1.0)
            np.add.at(sx, gidx, frames)
            np.add.at(sxx, gidx, frames * frames)
            # each chain position is occupied exactly once
            starts = np.concatenate([[True], path[1:] != path[:-1]])
            np.add.at(visits, gidx[starts], 1.0)
        if report is not None:
            report.logliks.append(total)
            if r == 0:
                report.skipped.extend(skipped)
            for uid in skipped:
                log.warning("alignment infeasible, utterance skipped: %s", uid)
        _m_step(hmms, n, visits, sx, sxx, floor, cfg.trans_floor)
    if report is not None and cfg.em_iters > 0:
        results = _e_step(jobs, hmms, workers)
        report.logliks.append(sum(res[0] for res in results if res is not None))
    return hmms


def _m_step(hmms: HMMSet, n, visits, sx, sxx, floor, trans_floor):
    S = hmms.n_states
    for mid in hmms.ids:
        rows = slice(hmms.row_of[mid] * S, (hmms.row_of[mid] + 1) * S)
        cnt = n[rows]
        if np.any(cnt == 0):
            continue
        m = hmms.models[mid]
        mean = sx[rows] / cnt[:, None]
        m.means = mean
        m.vars = np.maximum(sxx[rows] / cnt[:, None] - mean**2, floor)
        for j in range(S):
            ls, ln = _transition_logs((cnt[j] - visits[rows][j]) / cnt[j], trans_floor)
            m.log_self[j] = ls
            m.log_next[j] = ln
    hmms.untrained = frozenset(i for i in hmms.untrained if n[hmms.row_of[i] * S] == 0)
    hmms._refresh()
