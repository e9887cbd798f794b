"""The iterative discovery loop: initial labels, then three cascaded stages.

Stage I alternates HMM training, lexicon harvesting and free-word decoding
without a language model. Stage II adds a bigram LM to the decode. Stage
III rebuilds the lexicon from frequent, context-rich subword strings
before each retrain and decode. Every iteration appends one row to the
ledger and every stage stops early once successive label sets agree on
nearly every utterance.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
import pickle
from dataclasses import dataclass, field, replace

from .corpus import FeatureCorpus
from .fileio import atomic_write_bytes
from .decoder import DecodeConfig, decode_corpus
from .hmm import HMMConfig, HMMSet, init_hmms_from_labels, train_hmms
from .initializer import InitConfig, build_initial_labels
from .labels import CorpusLabels
from .lexicon import Lexicon, harvest_lexicon, rewrite_labels
from .ngram import NGramLM, estimate_ngram
from .pattree import build_pat_tree, mine_candidates, relabel_with_candidates

log = logging.getLogger(__name__)

STAGES = ("I", "II", "III")
LEDGER_FIELDS = ("iteration", "stage", "lexicon_size", "subword_count", "word_consistency", "utt_consistency")


@dataclass(frozen=True)
class StageConfig:
    I_a: int = 30
    I_l: int = 30
    I_x: int = 30
    consistency_stop: float = 0.995
    min_count: int = 5
    lm_order: int = 2
    mine_min_count: int = 5
    mine_min_entropy: float = 1.0
    mine_min_len: int = 2
    mine_max_len: int = 8
    init: InitConfig = field(default_factory=InitConfig)
    hmm: HMMConfig = field(default_factory=HMMConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        for name in ("I_a", "I_l", "I_x", "min_count", "mine_min_count"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.consistency_stop <= 1.0:
            raise ValueError("consistency_stop must lie in [0, 1]")
        if self.lm_order < 1:
            raise ValueError("lm_order must be >= 1")

    @classmethod
    def from_flat(cls, d):
        """Build from one flat mapping; keys are routed to the owning config by field name.

        ``init_mode`` sets the initializer's ``mode``.
        """
        own, sub = {}, {"init": {}, "hmm": {}, "decode": {}}
        owners = {
            "init": {f.name for f in dataclasses.fields(InitConfig)},
            "hmm": {f.name for f in dataclasses.fields(HMMConfig)},
            "decode": {f.name for f in dataclasses.fields(DecodeConfig)},
        }
        mine = {f.name for f in dataclasses.fields(cls)} - set(owners)
        for key, value in d.items():
            if key == "init_mode":
                key = "mode"
            if key in mine:
                own[key] = value
                continue
            for name, keys in owners.items():
                if key in keys:
                    sub[name][key] = value
                    break
            else:
                raise ValueError(f"unknown config key: {key}")
        return cls(
            init=InitConfig(**sub["init"]),
            hmm=HMMConfig(**sub["hmm"]),
            decode=DecodeConfig(**sub["decode"]),
            **own,
        )


@dataclass(frozen=True)
class LedgerRow:
    iteration: int
    stage: str
    lexicon_size: int
    subword_count: int
    word_consistency: float
    utt_consistency: float


@dataclass
class PipelineState:
    labels: CorpusLabels
    hmms: HMMSet
    lexicon: Lexicon
    n_subwords: int
    lm: NGramLM | None = None
    ledger: list = field(default_factory=list)
    # stages finished, in order; lets a resumed run skip them
    done: list = field(default_factory=list)

    def check(self):
        """Raise unless labels, lexicon and models agree with each other."""
        for u in self.labels:
            for t in u.tokens:
                if t.word not in self.lexicon:
                    raise ValueError(f"{u.utterance_id}: word {t.word} missing from the lexicon")
                if self.lexicon[t.word].subwords != t.subwords:
                    raise ValueError(f"{u.utterance_id}: word {t.word} spelled differently from the lexicon")
        missing = {s for seq in self.lexicon.sequences() for s in seq} - set(self.hmms.ids)
        if missing:
            raise ValueError(f"lexicon uses subwords without models: {sorted(missing)}")


# ------------------------------------------------------------ consistency


def _matched_tokens(a, b):
    """Matches in a minimum-edit alignment of ``a`` and ``b``, taking the most matches among ties."""
    n, m = len(a), len(b)
    # cells hold (edits, -matches); tuples compare lexicographically
    prev = [(j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0)] + [None] * m
        for j in range(1, m + 1):
            e, nm = prev[j - 1]
            diag = (e, nm - 1) if a[i - 1] == b[j - 1] else (e + 1, nm)
            up = (prev[j][0] + 1, prev[j][1])
            left = (cur[j - 1][0] + 1, cur[j - 1][1])
            cur[j] = min(diag, up, left)
        prev = cur
    return -prev[m][1]


def consistency(prev: CorpusLabels, new: CorpusLabels):
    """(word_level, utterance_level) agreement between two label sets of the same utterances."""
    p, q = prev.by_id(), new.by_id()
    if set(p) != set(q) or len(p) != len(prev) or len(q) != len(new):
        raise ValueError("label sets cover different utterances")
    if not p:
        return 1.0, 1.0
    word = 0.0
    same = 0
    for uid in prev.ids:
        a, b = p[uid].words, q[uid].words
        if a == b:
            same += 1
        longest = max(len(a), len(b))
        word += 1.0 if longest == 0 else _matched_tokens(a, b) / longest
    return word / len(p), same / len(p)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(state: PipelineState, position, path):
    """``position`` is (stage, iterations already run in that stage)."""
    atomic_write_bytes(path, pickle.dumps((state, position), protocol=4))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return pickle.load(fh)


def ledger_csv(ledger) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LEDGER_FIELDS)
    for r in ledger:
        w.writerow([r.iteration, r.stage, r.lexicon_size, r.subword_count, repr(r.word_consistency), repr(r.utt_consistency)])
    return buf.getvalue()


def write_ledger(ledger, path):
    atomic_write_bytes(path, ledger_csv(ledger).encode("utf-8"))


# ------------------------------------------------------------ stages


def initial_state(corpus: FeatureCorpus, cfg: StageConfig = StageConfig(), workers=None) -> PipelineState:
    init = build_initial_labels(corpus, cfg.init, workers)
    hmms = init_hmms_from_labels(corpus, init.labels, cfg.hmm, init.n_subword_patterns)
    return PipelineState(init.labels, hmms, init.initial_lexicon, init.n_subword_patterns)


def _decode_keeping_failures(corpus, hmms, lex, lm, dcfg, prev: CorpusLabels, workers):
    """Decode the corpus; an utterance that cannot be decoded keeps its
    previous label, split into singletons where the lexicon lacks a word."""
    failures = []
    new = decode_corpus(corpus, hmms, lex, lm, dcfg, workers, failures)
    if not failures:
        return new
    got = new.by_id()
    fallback = rewrite_labels(CorpusLabels(tuple(u for u in prev if u.utterance_id not in got)), lex).by_id()
    return CorpusLabels(tuple(got.get(u.utterance_id) or fallback[u.utterance_id] for u in prev))


def _finish_iteration(state, stage, new_labels, hmms, lex, lm):
    word, utt = consistency(state.labels, new_labels)
    row = LedgerRow(len(state.ledger) + 1, stage, len(lex), state.n_subwords, word, utt)
    log.info(
        "stage %s iteration %d: lexicon %d, word consistency %.4f, utterance consistency %.4f",
        stage, row.iteration, row.lexicon_size, word, utt,
    )
    return replace(state, labels=new_labels, hmms=hmms, lexicon=lex, lm=lm, ledger=state.ledger + [row])


def should_stop(row: LedgerRow, cfg: StageConfig) -> bool:
    return row.utt_consistency >= cfg.consistency_stop


def _stage_iteration(stage, state: PipelineState, corpus, cfg: StageConfig, workers):
    if stage == "III":
        return _lexical_iteration(state, corpus, cfg, workers)
    hmms = train_hmms(corpus, state.labels, state.hmms, cfg.hmm, workers=workers)
    lex = harvest_lexicon(state.labels, cfg.min_count, state.n_subwords)
    labels = rewrite_labels(state.labels, lex)
    lm = None
    dcfg = cfg.decode
    if stage == "I":
        dcfg = replace(dcfg, use_lm=False)
    else:
        lm = estimate_ngram(labels, cfg.lm_order, vocab=lex.ids)
    new = _decode_keeping_failures(corpus, hmms, lex, lm, dcfg, labels, workers)
    return _finish_iteration(state, stage, new, hmms, lex, lm)


def _lexical_iteration(state: PipelineState, corpus, cfg: StageConfig, workers):
    tree = build_pat_tree([u.subword_stream for u in state.labels])
    cands = mine_candidates(tree, cfg.mine_min_count, cfg.mine_min_entropy, cfg.mine_min_len, cfg.mine_max_len)
    relabelled, lex = relabel_with_candidates(state.labels, cands, state.lexicon)
    hmms = train_hmms(corpus, relabelled, state.hmms, cfg.hmm, workers=workers)
    lm = estimate_ngram(relabelled, cfg.lm_order, vocab=lex.ids)
    new = _decode_keeping_failures(corpus, hmms, lex, lm, cfg.decode, relabelled, workers)
    return _finish_iteration(state, "III", new, hmms, lex, lm)


def _cap(stage, cfg: StageConfig):
    return {"I": cfg.I_a, "II": cfg.I_l, "III": cfg.I_x}[stage]


def run_stage(stage, state: PipelineState, corpus, cfg: StageConfig = StageConfig(), workers=None, checkpoint=None, start=0):
    """Run one stage for at most its iteration cap, stopping early on consistency.

    With ``checkpoint`` set, the state is saved before every iteration.
    ``start`` counts iterations of this stage already run (for resuming).
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    stopped = start > 0 and should_stop(state.ledger[-1], cfg)
    it = start
    while it < _cap(stage, cfg) and not stopped:
        if checkpoint is not None:
            save_checkpoint(state, (stage, it), checkpoint)
        state = _stage_iteration(stage, state, corpus, cfg, workers)
        it += 1
        stopped = should_stop(state.ledger[-1], cfg)
    if stage == "III" and it > 0:
        # the final LM comes from the final labels
        state = replace(state, lm=estimate_ngram(state.labels, cfg.lm_order, vocab=state.lexicon.ids))
    return replace(state, done=state.done + [stage])


def run_stage_I(state, corpus, cfg: StageConfig = StageConfig(), workers=None, checkpoint=None):
    return run_stage("I", state, corpus, cfg, workers, checkpoint)


def run_stage_II(state, corpus, cfg: StageConfig = StageConfig(), workers=None, checkpoint=None):
    return run_stage("II", state, corpus, cfg, workers, checkpoint)


def run_stage_III(state, corpus, cfg: StageConfig = StageConfig(), workers=None, checkpoint=None):
    return run_stage("III", state, corpus, cfg, workers, checkpoint)


def run_full(corpus: FeatureCorpus, cfg: StageConfig = StageConfig(), seed=None, workers=None, workdir=None, resume=False, stages=STAGES) -> PipelineState:
    """Initial labels followed by the given stages.

    ``seed`` overrides the initializer seed. With ``workdir`` set, a
    checkpoint is kept there (and the ledger is written after every stage);
    ``resume`` continues from that checkpoint.
    """
    if seed is not None:
        cfg = replace(cfg, init=replace(cfg.init, seed=seed))
    ckpt = ledger_path = None
    if workdir is not None:
        os.makedirs(workdir, exist_ok=True)
        ckpt = os.path.join(workdir, "checkpoint.pkl")
        ledger_path = os.path.join(workdir, "ledger.csv")
    position = None
    if resume and ckpt is not None and os.path.exists(ckpt):
        state, position = load_checkpoint(ckpt)
        log.info("resuming at stage %s iteration %d", *position)
    else:
        state = initial_state(corpus, cfg, workers)
    for stage in stages:
        if stage in state.done:
            continue
        start = position[1] if position is not None and position[0] == stage else 0
        state = run_stage(stage, state, corpus, cfg, workers, ckpt, start)
        if ckpt is not None:
            save_checkpoint(state, (stage, _cap(stage, cfg)), ckpt)
            write_ledger(state.ledger, ledger_path)
    return state
