"""Initial labels: word-like segmentation, watershed subword segmentation
of self-similarity dotplots, and k-means over segment means.

Three initialisation modes share this machinery:

``two_level``
    utterance -> word-like segments -> subword segments; each word
    segment's subword-ID sequence is a word-like pattern.
``one_level``
    watershed on the whole utterance, every subword segment its own token.
``random``
    the ``one_level`` segments with pattern ids drawn at random (same count
    of ids as clustering would give).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.ndimage import gaussian_filter
from skimage.morphology import h_minima, local_minima
from skimage.measure import label as label_components
from skimage.segmentation import watershed

from .corpus import FeatureCorpus
from .labels import CorpusLabels, Token, UtteranceLabel
from .lexicon import Lexicon, WordPattern
from .parallel import pmap

log = logging.getLogger(__name__)

MODES = ("two_level", "one_level", "random")


@dataclass(frozen=True)
class InitConfig:
    mode: str = "two_level"
    min_word_frames: int = 20
    peak_gap: int = 10
    energy_weight: float = 0.5
    spectral_weight: float = 0.5
    score_window: int = 5
    # a boundary peak must exceed mean + peak_std * std of the score curve
    peak_std: float = 1.0
    energy_dim: int = 0
    static_dims: int = 13
    dotplot_sigma: float = 1.0
    # minima shallower than this are not flooding sources; 0 keeps all
    watershed_h: float = 0.0
    min_subword_frames: int = 13
    k_min: int = 2
    k_max: int | None = None
    scatter_threshold: float = 0.02
    kmeans_iters: int = 50
    kmeans_tol: float = 1e-6
    kmeans_restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.min_word_frames < self.min_subword_frames:
            raise ValueError("min_word_frames must be >= min_subword_frames")
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")


@dataclass(frozen=True)
class SegmentBoundary:
    utterance_id: str
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if not 0 <= self.start_frame < self.end_frame:
            raise ValueError(f"bad segment [{self.start_frame}, {self.end_frame})")


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    raw: np.ndarray

    @property
    def size(self):
        return self.values.shape[0]


@dataclass
class ClusteringResult:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    scatter_ratio_curve: list

    def __eq__(self, other):
        return (
            isinstance(other, ClusteringResult)
            and self.k == other.k
            and np.array_equal(self.assignments, other.assignments)
            and np.array_equal(self.centroids, other.centroids)
            and self.scatter_ratio_curve == other.scatter_ratio_curve
        )


@dataclass
class InitialLabels:
    labels: CorpusLabels
    n_subword_patterns: int
    initial_lexicon: Lexicon
    clustering: ClusteringResult | None = field(default=None, repr=False)


# ------------------------------------------------------- word segmentation


def _window_means(x, w):
    """Means of the w frames before and from each frame t (truncated at the edges)."""
    c = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    T = x.shape[0]
    t = np.arange(T)
    lo = np.maximum(t - w, 0)
    hi = np.minimum(t + w, T)
    before = (c[t] - c[lo]) / np.maximum(t - lo, 1)[:, None]
    after = (c[hi] - c[t]) / (hi - t)[:, None]
    return before, after


def discontinuity_score(frames, cfg: InitConfig = InitConfig()):
    """Boundary score before every frame (score[0] is 0).

    Weighted sum of the jump in mean log-energy and the Euclidean distance
    between mean static MFCC vectors, over ``score_window`` frames on each side.
    """
    frames = np.asarray(frames, dtype=np.float64)
    static = frames[:, : min(cfg.static_dims, frames.shape[1])]
    before, after = _window_means(static, cfg.score_window)
    e = cfg.energy_dim
    energy = np.abs(after[:, e] - before[:, e])
    spec_cols = [i for i in range(static.shape[1]) if i != e] or [e]
    spectral = np.linalg.norm(after[:, spec_cols] - before[:, spec_cols], axis=1)
    score = cfg.energy_weight * energy + cfg.spectral_weight * spectral
    score[0] = 0.0
    return score


def detect_word_segments(features, cfg: InitConfig = InitConfig()):
    frames = features.frames
    T = len(frames)
    uid = features.utterance_id
    if T < 2 * cfg.min_word_frames:
        return [SegmentBoundary(uid, 0, T)]
    score = discontinuity_score(frames, cfg)
    thresh = score.mean() + cfg.peak_std * score.std()
    peaks = [
        t for t in range(1, T - 1)
        if score[t] > 0 and score[t] > thresh and score[t] > score[t - 1] and score[t] >= score[t + 1]
    ]
    peaks.sort(key=lambda t: (-score[t], t))
    chosen = []
    for t in peaks:
        if t < cfg.min_word_frames or T - t < cfg.min_word_frames:
            continue
        if any(abs(t - c) < max(cfg.peak_gap, cfg.min_word_frames) for c in chosen):
            continue
        chosen.append(t)
    cuts = [0] + sorted(chosen) + [T]
    return [SegmentBoundary(uid, a, b) for a, b in zip(cuts[:-1], cuts[1:])]


# --------------------------------------------------- dotplot and watershed


def cosine_similarity(frames):
    x = np.asarray(frames, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    u = x / safe[:, None]
    sim = u @ u.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    np.clip(sim, -1.0, 1.0, out=sim)
    return (sim + sim.T) / 2


def build_dotplot(seg_frames, sigma=1.0, static_dims=None) -> SimilarityMatrix:
    """Cosine self-similarity of the frames, then Gaussian smoothing."""
    x = np.asarray(seg_frames, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("a dotplot needs at least 2 frames")
    if static_dims is not None:
        x = x[:, :static_dims]
    raw = cosine_similarity(x)
    values = gaussian_filter(raw, sigma=sigma, mode="nearest") if sigma > 0 else raw.copy()
    values = (values + values.T) / 2
    return SimilarityMatrix(values, raw)


def flood_markers(surface, h=0.0):
    """Regional minima of ``surface`` (8-connected plateaus), labelled 1..n."""
    if h > 0:
        minima = h_minima(surface, h)
    else:
        minima = local_minima(surface, connectivity=2, allow_borders=True)
    return label_components(minima.astype(np.uint8), connectivity=2)


def watershed_labels(m: SimilarityMatrix, h=0.0):
    surface = -m.values
    if np.ptp(surface) == 0:
        return np.ones(surface.shape, dtype=np.int64)
    return watershed(surface, markers=flood_markers(surface, h), connectivity=2)


def watershed_subword_boundaries(m: SimilarityMatrix, h=0.0):
    """Sorted interior indices where the basin label changes along the main diagonal."""
    lab = watershed_labels(m, h)
    diag = np.diag(lab)
    return [int(i) for i in np.flatnonzero(diag[1:] != diag[:-1]) + 1]


def representative_vector(seg_frames):
    x = np.asarray(seg_frames, dtype=np.float64)
    if len(x) < 1:
        raise ValueError("empty segment")
    return x.mean(axis=0)


def merge_short_segments(frames, cuts, min_frames):
    """Merge segments shorter than ``min_frames`` into their more similar neighbour.

    ``cuts`` are segment edges including 0 and len(frames).
    """
    cuts = list(cuts)
    while len(cuts) > 2:
        lengths = np.diff(cuts)
        i = int(np.argmin(lengths))
        if lengths[i] >= min_frames:
            break
        means = [frames[a:b].mean(axis=0) for a, b in zip(cuts[:-1], cuts[1:])]
        if i == 0:
            drop = 1
        elif i == len(lengths) - 1:
            drop = i
        else:
            left = _cos(means[i], means[i - 1])
            right = _cos(means[i], means[i + 1])
            drop = i if left >= right else i + 1
        del cuts[drop]
    return cuts


def _cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def subword_segments(frames, cfg: InitConfig = InitConfig()):
    """Edges (0, ..., len) of the subword segments of one word-like segment."""
    T = len(frames)
    if T < 2:
        return [0, T]
    m = build_dotplot(frames, cfg.dotplot_sigma, cfg.static_dims)
    cuts = [0] + watershed_subword_boundaries(m, cfg.watershed_h) + [T]
    return merge_short_segments(np.asarray(frames), cuts, cfg.min_subword_frames)


# ------------------------------------------------------------- clustering


def kmeans(x, k, rng, iters=50, tol=1e-6, history=None):
    """Lloyd iterations from k-means++ seeding. Empty clusters keep their centroid."""
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    assign = _assign(x, centroids)
    for _ in range(iters):
        if history is not None:
            history.append(within_scatter(x, assign, centroids))
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        assign = _assign(x, centroids)
        if shift < tol:
            break
    if history is not None:
        history.append(within_scatter(x, assign, centroids))
    return centroids, assign


def _assign(x, c):
    # |x|^2 is the same for every centroid, so it is left out of the argmin
    return np.argmin((c * c).sum(1)[None, :] - 2 * (x @ c.T), axis=1)


def within_scatter(x, assign, centroids):
    return float(((x - centroids[assign]) ** 2).sum())


def scatter_ratio(x, assign, centroids):
    """Within-cluster total scatter over between-cluster total scatter."""
    within = within_scatter(x, assign, centroids)
    mu = x.mean(axis=0)
    counts = np.bincount(assign, minlength=len(centroids))
    between = float((counts * ((centroids - mu) ** 2).sum(axis=1)).sum())
    if between == 0:
        return 0.0 if within == 0 else float("inf")
    return within / between


def select_k_and_cluster(vectors, k_range, seed=0, scatter_threshold=0.02, iters=50, tol=1e-6, restarts=3) -> ClusteringResult:
    """Pick the cluster count from the within/between scatter ratio.

    The smallest k whose ratio drops below ``scatter_threshold`` wins. If no
    k gets there, the elbow of the log-ratio curve (largest second
    difference) is used. Each k keeps the best of ``restarts`` seedings.
    """
    x = np.asarray(vectors, dtype=np.float64)
    k_lo, k_hi = k_range
    if len(x) < k_hi:
        raise ValueError(f"{len(x)} vectors, fewer than k_max={k_hi}")
    curve = []
    fits = {}
    chosen = None
    for k in range(k_lo, k_hi + 1):
        best = None
        for rep in range(max(1, restarts)):
            c, a = kmeans(x, k, np.random.default_rng([seed, k, rep]), iters, tol)
            w = within_scatter(x, a, c)
            if best is None or w < best[0]:
                best = (w, c, a)
        _, c, a = best
        r = scatter_ratio(x, a, c)
        curve.append((k, r))
        fits[k] = (c, a)
        if r < scatter_threshold:
            chosen = k
            break
    if chosen is None:
        chosen = _elbow(curve)
    c, a = fits[chosen]
    return ClusteringResult(chosen, a, c, curve)


def _elbow(curve):
    if len(curve) < 3:
        return min(curve, key=lambda kr: (kr[1], kr[0]))[0]
    ks = [k for k, _ in curve]
    lr = np.log(np.maximum([r for _, r in curve], 1e-300))
    d2 = lr[:-2] - 2 * lr[1:-1] + lr[2:]
    return ks[1 + int(np.argmax(d2))]


# ------------------------------------------------------------ whole chain


def _segment_utterance(features, cfg: InitConfig):
    """[(word_start, word_end, [subword edges])] for one utterance."""
    frames = features.frames
    if cfg.mode == "two_level":
        words = detect_word_segments(features, cfg)
    else:
        words = [SegmentBoundary(features.utterance_id, 0, len(frames))]
    out = []
    for w in words:
        edges = subword_segments(frames[w.start_frame : w.end_frame], cfg)
        out.append((w.start_frame, w.end_frame, [w.start_frame + e for e in edges]))
    return out


def default_k_range(n_vectors, cfg: InitConfig):
    k_hi = cfg.k_max if cfg.k_max is not None else min(300, n_vectors // 10)
    k_hi = max(min(k_hi, n_vectors), 1)
    k_lo = min(cfg.k_min, k_hi)
    return k_lo, k_hi


def build_initial_labels(corpus: FeatureCorpus, cfg: InitConfig = InitConfig(), workers=None) -> InitialLabels:
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    segs = pmap(partial(_segment_utterance, cfg=cfg), list(corpus), workers)
    vectors = []
    for f, utt in zip(corpus, segs):
        for _, _, edges in utt:
            for a, b in zip(edges[:-1], edges[1:]):
                vectors.append(representative_vector(f.frames[a:b]))
    vectors = np.asarray(vectors)
    k_range = default_k_range(len(vectors), cfg)
    if len(vectors) == 1 or k_range[1] < 2:
        clustering = ClusteringResult(1, np.zeros(len(vectors), dtype=np.int64), vectors.mean(axis=0, keepdims=True), [(1, 0.0)])
    else:
        clustering = select_k_and_cluster(
            vectors, k_range, cfg.seed, cfg.scatter_threshold, cfg.kmeans_iters, cfg.kmeans_tol, cfg.kmeans_restarts
        )
    k = clustering.k
    if cfg.mode == "random":
        ids = np.random.default_rng([cfg.seed, 7]).integers(0, k, size=len(vectors))
    else:
        ids = clustering.assignments
    log.info("initial subword patterns: %d from %d segments", k, len(vectors))

    word_ids = {}
    counts = {}
    utts = []
    pos = 0
    for f, utt in zip(corpus, segs):
        tokens = []
        for w_start, w_end, edges in utt:
            spans = list(zip(edges[:-1], edges[1:]))
            subs = tuple(int(s) for s in ids[pos : pos + len(spans)])
            pos += len(spans)
            if cfg.mode == "two_level":
                groups = [(subs, spans)]
            else:
                groups = [((s,), [sp]) for s, sp in zip(subs, spans)]
            for seq, sp in groups:
                wid = word_ids.setdefault(seq, len(word_ids))
                counts[seq] = counts.get(seq, 0) + 1
                tokens.append(Token(wid, sp[0][0], sp[-1][1], seq, sp))
        utts.append(UtteranceLabel(f.utterance_id, tokens))
    lexicon = Lexicon([WordPattern(wid, seq, counts[seq]) for seq, wid in word_ids.items()], k)
    return InitialLabels(CorpusLabels(tuple(utts)), k, lexicon, clustering)
