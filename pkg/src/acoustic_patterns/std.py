"""Query-by-example spoken term detection over discovered HMM sequences.

Model-to-model distances are precomputed once: two HMMs are compared by
dynamic time warping over their state sequences with a symmetrized KL
cost. Online, a query's model sequence is matched against every
utterance's decoded sequence by subsequence DTW using only table lookups.
Two systems' distances can be fused by a weighted sum before ranking.
"""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass
from functools import partial

import numpy as np
from numba import njit

from .hmm import GaussianState, HMMSet, SubwordHMM
from .fileio import atomic_write_bytes, write_json
from .labels import CorpusLabels, UtteranceLabel
from .parallel import pmap

TABLE_MAGIC = b"PDT1"
TABLE_VERSION = 1


# ------------------------------------------------------------ distances


def kl_gaussian(a: GaussianState, b: GaussianState) -> float:
    """KL(a||b) + KL(b||a) for diagonal Gaussians."""
    ma, va = np.asarray(a.mean, dtype=np.float64), np.asarray(a.var, dtype=np.float64)
    mb, vb = np.asarray(b.mean, dtype=np.float64), np.asarray(b.var, dtype=np.float64)
    if ma.shape != mb.shape:
        raise ValueError(f"dimension mismatch: {ma.shape} vs {mb.shape}")
    return float(_sym_kl(ma, va, mb, vb))


@njit(cache=True)
def _sym_kl(ma, va, mb, vb):
    d2 = (ma - mb) ** 2
    return 0.5 * np.sum(va / vb + vb / va - 2.0 + d2 * (1.0 / va + 1.0 / vb))


def state_costs(h1: SubwordHMM, h2: SubwordHMM):
    """Matrix of symmetrized KL divergences between the states of two models."""
    if h1.means.shape[1] != h2.means.shape[1]:
        raise ValueError("models have different feature dimensions")
    return _cost_matrix(h1.means, h1.vars, h2.means, h2.vars)


@njit(cache=True)
def _cost_matrix(m1, v1, m2, v2):
    n, m = m1.shape[0], m2.shape[0]
    c = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            c[i, j] = _sym_kl(m1[i], v1[i], m2[j], v2[j])
    return c


@njit(cache=True)
def min_mean_path_cost(c):
    """Smallest (path cost / path length) over monotone paths from (0,0) to (n-1,m-1).

    Steps are (1,0), (0,1) and (1,1). ``best[i, j, L]`` is the cheapest
    path ending at (i, j) that visits L + 1 cells.
    """
    n, m = c.shape
    K = n + m - 1
    best = np.full((n, m, K), np.inf)
    best[0, 0, 0] = c[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            for L in range(1, min(i + j, K - 1) + 1):
                v = np.inf
                if i > 0 and best[i - 1, j, L - 1] < v:
                    v = best[i - 1, j, L - 1]
                if j > 0 and best[i, j - 1, L - 1] < v:
                    v = best[i, j - 1, L - 1]
                if i > 0 and j > 0 and best[i - 1, j - 1, L - 1] < v:
                    v = best[i - 1, j - 1, L - 1]
                if v < np.inf:
                    best[i, j, L] = v + c[i, j]
    out = np.inf
    for L in range(K):
        v = best[n - 1, m - 1, L] / (L + 1)
        if v < out:
            out = v
    return out


def hmm_distance(h1: SubwordHMM, h2: SubwordHMM) -> float:
    """DTW distance between the state sequences of two models, normalised by path length.

    The alignment minimising the mean cost per matched state pair is used,
    so models with different state counts stay comparable.
    """
    return float(min_mean_path_cost(state_costs(h1, h2)))


@dataclass
class ModelDistanceTable:
    ids: tuple
    matrix: np.ndarray

    def __post_init__(self):
        self.ids = tuple(int(i) for i in self.ids)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (len(self.ids), len(self.ids)):
            raise ValueError("matrix shape does not match the id list")
        self.index = {m: k for k, m in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValueError("duplicate model ids")

    def __eq__(self, other):
        return isinstance(other, ModelDistanceTable) and self.ids == other.ids and np.array_equal(self.matrix, other.matrix)

    def __getitem__(self, pair):
        a, b = pair
        return float(self.matrix[self.index[a], self.index[b]])

    def rows(self, seq):
        try:
            return np.array([self.index[s] for s in seq], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"model {exc.args[0]} is not in the distance table") from None


def _row_job(i, models):
    return [hmm_distance(models[i], models[j]) for j in range(i + 1, len(models))]


def build_distance_table(hmms: HMMSet, workers=None) -> ModelDistanceTable:
    """All pairwise model distances; rows are computed in parallel."""
    ids = sorted(hmms.ids)
    models = [hmms[i] for i in ids]
    n = len(ids)
    rows = pmap(partial(_row_job, models=models), range(n), workers)
    mat = np.zeros((n, n))
    for i, row in enumerate(rows):
        for k, d in enumerate(row):
            mat[i, i + 1 + k] = mat[i + 1 + k, i] = d
    return ModelDistanceTable(tuple(ids), mat)


def save_table(table: ModelDistanceTable, path):
    """Binary layout: magic, version (u32), n (u32), n int64 ids, n*n float32 row-major; little-endian."""
    n = len(table.ids)
    data = TABLE_MAGIC + struct.pack("<II", TABLE_VERSION, n)
    data += np.asarray(table.ids, dtype="<i8").tobytes()
    data += np.asarray(table.matrix, dtype="<f4").tobytes()
    atomic_write_bytes(path, data)


def load_table(path) -> ModelDistanceTable:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TABLE_MAGIC:
        raise ValueError("not a distance table (bad header)")
    if len(data) < 12:
        raise ValueError("truncated distance table")
    version, n = struct.unpack("<II", data[4:12])
    if version != TABLE_VERSION:
        raise ValueError(f"unsupported distance table version {version}")
    need = 12 + 8 * n + 4 * n * n
    if len(data) != need:
        raise ValueError(f"distance table size {len(data)} != expected {need}")
    ids = np.frombuffer(data, dtype="<i8", count=n, offset=12)
    mat = np.frombuffer(data, dtype="<f4", count=n * n, offset=12 + 8 * n).reshape(n, n)
    return ModelDistanceTable(tuple(int(i) for i in ids), mat.astype(np.float64))


# ------------------------------------------------------------ search


@njit(cache=True)
def _subsequence_dtw(c):
    """Best matched-pair sum aligning all of the query (rows) to any contiguous stretch of columns."""
    n, m = c.shape
    # row "-1" is all zeros, so a path may begin at any column
    prev = np.zeros(m + 1)
    cur = np.empty(m + 1)
    for i in range(n):
        cur[0] = np.inf
        for j in range(1, m + 1):
            v = prev[j - 1]
            if prev[j] < v:
                v = prev[j]
            if cur[j - 1] < v:
                v = cur[j - 1]
            cur[j] = c[i, j - 1] + v
        for j in range(m + 1):
            prev[j] = cur[j]
    out = np.inf
    for j in range(1, m + 1):
        if prev[j] < out:
            out = prev[j]
    return out


def sequence_distance(q, u, table: ModelDistanceTable) -> float:
    """Smallest sum of matched model-pair distances between ``q`` and any stretch of ``u``.

    DTW steps are (1,0), (0,1) and (1,1); every step adds one pair's distance.
    """
    if len(q) == 0 or len(u) == 0:
        raise ValueError("empty model sequence")
    c = table.matrix[np.ix_(table.rows(q), table.rows(u))]
    return float(_subsequence_dtw(np.ascontiguousarray(c)))


def select_query_model(occurrences):
    """Most frequent model sequence; ties go to the shortest, then the lexicographically smallest."""
    counts = Counter(tuple(o) for o in occurrences if len(o) > 0)
    if not counts:
        raise ValueError("no non-empty occurrence")
    return list(min(counts, key=lambda s: (-counts[s], len(s), s)))


def span_subwords(label: UtteranceLabel, start, end):
    """Subword ids of the segments whose central frame falls inside [start, end)."""
    return [s for s, (a, b) in zip(label.subword_stream, label.subword_spans) if start <= (a + b - 1) // 2 < end]


@dataclass(frozen=True)
class Query:
    term_id: str
    occurrences: tuple
    model_sequence: tuple

    def __post_init__(self):
        object.__setattr__(self, "occurrences", tuple(tuple(o) for o in self.occurrences))
        object.__setattr__(self, "model_sequence", tuple(int(s) for s in self.model_sequence))
        if not self.model_sequence:
            raise ValueError(f"query {self.term_id}: empty model sequence")


def make_query(term_id, occurrences, labels: CorpusLabels) -> Query:
    """Query whose model sequence is the modal decoded sequence over its example spans."""
    by_id = labels.by_id()
    seqs = [span_subwords(by_id[uid], a, b) for uid, a, b in occurrences if uid in by_id]
    return Query(term_id, occurrences, tuple(select_query_model(seqs)))


@dataclass(frozen=True)
class RankedList:
    query_id: str
    items: tuple

    def __post_init__(self):
        object.__setattr__(self, "items", tuple((str(u), float(d)) for u, d in self.items))

    @property
    def utterance_ids(self):
        return [u for u, _ in self.items]

    @property
    def distances(self):
        return [d for _, d in self.items]


def _ranked(query_id, dist):
    """Ascending distance; equal distances keep utterance-id order."""
    return RankedList(query_id, sorted(dist.items(), key=lambda kv: (kv[1], kv[0])))


def search(q: Query, labels: CorpusLabels, table: ModelDistanceTable) -> RankedList:
    dist = {u.utterance_id: sequence_distance(q.model_sequence, u.subword_stream, table) for u in labels if u.tokens}
    return _ranked(q.term_id, dist)


def search_all(queries, labels: CorpusLabels, table: ModelDistanceTable, workers=None):
    lists = pmap(partial(search, labels=labels, table=table), list(queries), workers)
    return {r.query_id: r for r in lists}


def distances_of(ranked):
    """{(query, utterance): distance} from ranked lists keyed by query."""
    return {(q, u): d for q, r in ranked.items() for u, d in r.items}


def fuse_and_rank(d_s, d_u, lam):
    """Rank by ``lam * d_s + (1 - lam) * d_u``; inputs map (query, utterance) to a distance."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if set(d_s) != set(d_u):
        raise ValueError("supervised and unsupervised distances cover different (query, utterance) pairs")
    per_query = {}
    for key in sorted(d_s):
        q, u = key
        per_query.setdefault(q, {})[u] = lam * d_s[key] + (1.0 - lam) * d_u[key]
    return {q: _ranked(q, dist) for q, dist in per_query.items()}


# ------------------------------------------------------------ evaluation


def average_precision(ranked_ids, relevant):
    hits = 0
    total = 0.0
    for rank, uid in enumerate(ranked_ids, 1):
        if uid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def precision_at(ranked_ids, relevant, k):
    return sum(1 for u in ranked_ids[:k] if u in relevant) / k


def evaluate(ranked, relevance):
    """MAP, P@5 and P@10 over queries with at least one relevant utterance.

    ``ranked`` maps query id to :class:`RankedList`; ``relevance`` maps query
    id to the set of relevant utterance ids. Queries without relevant
    utterances are left out and listed under ``excluded``.
    """
    used, excluded = [], []
    for q in sorted(ranked):
        rel = set(relevance.get(q, ()))
        if rel:
            used.append(q)
        else:
            excluded.append(q)
    if not used:
        raise ValueError("no query has a relevant utterance")
    ap = [average_precision(ranked[q].utterance_ids, set(relevance[q])) for q in used]
    p5 = [precision_at(ranked[q].utterance_ids, set(relevance[q]), 5) for q in used]
    p10 = [precision_at(ranked[q].utterance_ids, set(relevance[q]), 10) for q in used]
    return {
        "MAP": math.fsum(ap) / len(used),
        "precision@5": math.fsum(p5) / len(used),
        "precision@10": math.fsum(p10) / len(used),
        "n_queries": len(used),
        "excluded": excluded,
        "per_query_ap": dict(zip(used, ap)),
    }


# ------------------------------------------------------------ files


def save_queries(queries, path):
    write_json(
        {
            "queries": [
                {"id": q.term_id, "occurrences": [list(o) for o in q.occurrences], "model_sequence": list(q.model_sequence)}
                for q in queries
            ]
        },
        path,
    )


def load_query_examples(path):
    """[(term id, [(utterance id, start, end)])] from a query file (model sequences ignored)."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return [(q["id"], [tuple(o) for o in q["occurrences"]]) for q in d["queries"]]


def save_ranks(ranked, path):
    write_json({q: [[u, d] for u, d in r.items] for q, r in sorted(ranked.items())}, path)


def load_ranks(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return {q: RankedList(q, [tuple(x) for x in items]) for q, items in d.items()}


def save_relevance(relevance, all_utterances, path):
    """TSV rows (query_id, utterance_id, 0/1) for every query and utterance."""
    lines = []
    for q in sorted(relevance):
        rel = set(relevance[q])
        for u in all_utterances:
            lines.append(f"{q}\t{u}\t{1 if u in rel else 0}\n")
    atomic_write_bytes(path, "".join(lines).encode("utf-8"))


def load_relevance(path):
    rel = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{n}: expected query_id<TAB>utterance_id<TAB>0|1")
            s = rel.setdefault(parts[0], set())
            if parts[2] == "1":
                s.add(parts[1])
    return rel
