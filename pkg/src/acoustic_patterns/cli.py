"""Command-line entry point: one subcommand per stage or experiment.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
With ``--json`` every report is printed as one JSON object on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .corpus import FeatureConfig, extract_directory, load_corpus, save_corpus
from .decoder import DecodeConfig, decode_corpus
from .fileio import write_json
from .hmm import HMMConfig, TrainReport, init_hmms_from_labels, load_hmms, save_hmms, train_hmms
from .initializer import InitConfig, build_initial_labels
from .labels import load_labels, save_labels
from .lexicon import harvest_lexicon, load_lexicon, save_lexicon
from .ngram import estimate_ngram, read_arpa, write_arpa
from .pattree import build_pat_tree, mine_candidates
from .pipeline import StageConfig, run_full
from .synth import (
    generate,
    load_truth,
    map_patterns,
    pattern_accuracy,
    save_truth,
    spec_from_dict,
    std_task,
    truth_hmms,
    truth_labels,
)
from . import std as stdmod

log = logging.getLogger("acoustic_patterns")


class ConfigError(ValueError):
    """Invalid configuration; reported with exit code 2."""


def read_config(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for k, v in d.items():
        if isinstance(v, dict):
            raise ConfigError(f"{path}: config must be flat, found table [{k}]")
    return d


def build(factory, d, what):
    try:
        return factory(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from None


def stage_config(d, seed=None):
    cfg = build(StageConfig.from_flat, d, "config")
    if seed is not None:
        cfg = replace(cfg, init=replace(cfg.init, seed=seed))
    return cfg


class Reporter:
    def __init__(self, as_json):
        self.as_json = as_json

    def emit(self, report: dict):
        if self.as_json:
            print(json.dumps(report, sort_keys=True))
            return
        for k in sorted(report):
            v = report[k]
            if isinstance(v, float):
                v = f"{v:.6g}"
            elif isinstance(v, (list, dict)):
                v = json.dumps(v, sort_keys=True)
            print(f"{k}: {v}")


# ------------------------------------------------------------ commands


def cmd_features(a, out):
    d = read_config(a.config)
    if a.no_cmvn:
        d["cmvn"] = False
    cfg = build(lambda x: FeatureConfig(**x), d, "feature config")
    corpus = extract_directory(a.input, cfg)
    save_corpus(corpus, a.out)
    out.emit({"utterances": len(corpus), "dim": corpus.dim, "out": a.out})


def cmd_init(a, out):
    d = read_config(a.config)
    if a.mode is not None:
        d["mode"] = a.mode
    if a.seed is not None:
        d["seed"] = a.seed
    if a.k_max is not None:
        d["k_max"] = a.k_max
    cfg = build(lambda x: InitConfig(**x), d, "init config")
    corpus = load_corpus(a.features)
    init = build_initial_labels(corpus, cfg, a.workers)
    save_labels(init.labels, a.out)
    if a.lexicon_out:
        save_lexicon(init.initial_lexicon, a.lexicon_out)
    if a.hmms_out:
        save_hmms(init_hmms_from_labels(corpus, init.labels, HMMConfig(), init.n_subword_patterns), a.hmms_out)
    out.emit({"subword_patterns": init.n_subword_patterns, "word_patterns": len(init.initial_lexicon), "out": a.out})


def cmd_train(a, out):
    d = read_config(a.config)
    if a.em_iters is not None:
        d["em_iters"] = a.em_iters
    cfg = build(lambda x: HMMConfig(**x), d, "hmm config")
    corpus = load_corpus(a.features)
    labels = load_labels(a.labels)
    hmms = load_hmms(a.hmms) if a.hmms else init_hmms_from_labels(corpus, labels, cfg)
    report = TrainReport()
    hmms = train_hmms(corpus, labels, hmms, cfg, report, a.workers)
    save_hmms(hmms, a.out)
    out.emit({"log_likelihoods": report.logliks, "skipped": report.skipped, "out": a.out})


def cmd_decode(a, out):
    d = read_config(a.config)
    for key in ("lm_scale", "word_insertion_penalty", "beam"):
        v = getattr(a, key)
        if v is not None:
            d[key] = v
    if a.lm is None:
        d["use_lm"] = False
    cfg = build(lambda x: DecodeConfig(**x), d, "decode config")
    corpus = load_corpus(a.features)
    lm = read_arpa(a.lm) if a.lm else None
    failures = []
    labels = decode_corpus(corpus, load_hmms(a.hmms), load_lexicon(a.lexicon), lm, cfg, a.workers, failures)
    save_labels(labels, a.out)
    out.emit({"decoded": len(labels), "failed": [u for u, _ in failures], "out": a.out})
    return 1 if failures and not labels.utterances else 0


def cmd_lexicon(a, out):
    labels = load_labels(a.labels)
    lex = harvest_lexicon(labels, a.min_count, a.n_subwords)
    save_lexicon(lex, a.out)
    out.emit({"entries": len(lex), "multi_subword": len(lex.multi_subword()), "out": a.out})


def cmd_lm(a, out):
    labels = load_labels(a.labels)
    vocab = load_lexicon(a.lexicon).ids if a.lexicon else None
    lm = estimate_ngram(labels, a.order, vocab=vocab)
    write_arpa(lm, a.out)
    out.emit({"order": lm.order, "vocab": len(lm.vocab), "out": a.out})


def cmd_mine(a, out):
    labels = load_labels(a.labels)
    tree = build_pat_tree([u.subword_stream for u in labels])
    cands = mine_candidates(tree, a.min_count, a.min_entropy, a.min_len, a.max_len)
    write_json({"candidates": [c.to_dict() for c in cands]}, a.out)
    out.emit({"candidates": len(cands), "out": a.out})


def cmd_run(a, out):
    cfg = stage_config(read_config(a.config), a.seed)
    corpus = load_corpus(a.features)
    state = run_full(corpus, cfg, workers=a.workers, workdir=a.workdir, resume=a.resume)
    save_labels(state.labels, os.path.join(a.workdir, "labels.json"))
    save_lexicon(state.lexicon, os.path.join(a.workdir, "lexicon.json"))
    save_hmms(state.hmms, os.path.join(a.workdir, "hmms.json"))
    if state.lm is not None:
        write_arpa(state.lm, os.path.join(a.workdir, "lm.arpa"))
    last = state.ledger[-1] if state.ledger else None
    out.emit(
        {
            "iterations": len(state.ledger),
            "lexicon_size": len(state.lexicon),
            "subword_patterns": state.n_subwords,
            "final_utt_consistency": last.utt_consistency if last else None,
            "ledger": os.path.join(a.workdir, "ledger.csv"),
        }
    )


def cmd_synth(a, out):
    d = read_config(a.spec)
    if a.seed is not None:
        d["seed"] = a.seed
    spec = build(spec_from_dict, d, "synth spec")
    corpus, truth = generate(spec)
    save_corpus(corpus, a.out)
    save_truth(truth, a.truth)
    if a.models_out:
        save_hmms(truth_hmms(truth), a.models_out)
    if a.labels_out:
        save_labels(truth_labels(truth), a.labels_out)
    report = {"utterances": len(corpus), "frames": int(sum(len(f) for f in corpus)), "out": a.out}
    if a.queries_out or a.relevance_out:
        queries, relevance = std_task(truth, a.n_queries)
        if a.queries_out:
            write_json({"queries": [{"id": t, "occurrences": [list(o) for o in occ]} for t, occ in queries]}, a.queries_out)
        if a.relevance_out:
            stdmod.save_relevance(relevance, corpus.ids, a.relevance_out)
        report["queries"] = len(queries)
    out.emit(report)


def cmd_eval(a, out):
    labels = load_labels(a.labels)
    truth = load_truth(a.truth)
    mapping = map_patterns(labels, truth)
    if a.what == "map":
        report = mapping.to_dict()
        report["majority_targets"] = mapping.majority_targets().tolist()
    else:
        report = pattern_accuracy(labels, truth, mapping)
    if a.out:
        write_json(report, a.out)
    out.emit(report)


def cmd_std(a, out):
    if a.std_cmd == "table":
        table = stdmod.build_distance_table(load_hmms(a.models), a.workers)
        stdmod.save_table(table, a.out)
        out.emit({"models": len(table.ids), "out": a.out})
    elif a.std_cmd == "search":
        table = stdmod.load_table(a.table)
        labels = load_labels(a.labels)
        queries = [stdmod.make_query(t, occ, labels) for t, occ in stdmod.load_query_examples(a.queries)]
        ranked = stdmod.search_all(queries, labels, table, a.workers)
        stdmod.save_ranks(ranked, a.out)
        out.emit({"queries": len(ranked), "utterances": len(labels), "out": a.out})
    elif a.std_cmd == "fuse":
        d_s = stdmod.distances_of(stdmod.load_ranks(a.ds))
        d_u = stdmod.distances_of(stdmod.load_ranks(a.du))
        ranked = stdmod.fuse_and_rank(d_s, d_u, a.lam)
        report = {"lambda": a.lam, "queries": len(ranked)}
        if a.out:
            stdmod.save_ranks(ranked, a.out)
            report["out"] = a.out
        else:
            report["ranks"] = {q: [[u, d] for u, d in r.items] for q, r in sorted(ranked.items())}
        out.emit(report)
    else:
        metrics = stdmod.evaluate(stdmod.load_ranks(a.ranks), stdmod.load_relevance(a.rel))
        if a.out:
            write_json(metrics, a.out)
        out.emit(metrics)


# ------------------------------------------------------------ parser


def _workers(s):
    n = int(s)
    if n < 0:
        raise argparse.ArgumentTypeError("workers must be >= 0")
    return n


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="print the report as JSON")
    common.add_argument("--workers", type=_workers, default=0, help="worker processes (0 = all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="acoustic-patterns", description="Unsupervised discovery of subword and word patterns in speech features.")
    sub = p.add_subparsers(dest="cmd", required=True, metavar="command")

    s = sub.add_parser("features", help="feature extraction")
    fsub = s.add_subparsers(dest="features_cmd", required=True, metavar="command")
    s = fsub.add_parser("extract", parents=[common], help="MFCC features from a directory of 16-bit mono WAV files")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-cmvn", action="store_true", help="skip corpus-level mean and variance normalisation")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_features)

    s = sub.add_parser("init", parents=[common], help="initial labels")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lexicon-out")
    s.add_argument("--hmms-out")
    s.add_argument("--mode", choices=["two_level", "one_level", "random"])
    s.add_argument("--seed", type=int)
    s.add_argument("--k-max", dest="k_max", type=int)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_init)

    s = sub.add_parser("train", parents=[common], help="Viterbi-EM training of subword HMMs")
    s.add_argument("--features", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--hmms", help="starting models (default: initialised from the labels)")
    s.add_argument("--models-out", "--out", dest="out", required=True)
    s.add_argument("--em-iters", type=int)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("decode", parents=[common], help="free-word decoding")
    s.add_argument("--features", required=True)
    s.add_argument("--models", "--hmms", dest="hmms", required=True)
    s.add_argument("--lexicon", required=True)
    s.add_argument("--lm")
    s.add_argument("--out", required=True)
    s.add_argument("--lm-scale", dest="lm_scale", type=float)
    s.add_argument("--wip", "--word-insertion-penalty", dest="word_insertion_penalty", type=float)
    s.add_argument("--beam", type=float)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_decode)

    s = sub.add_parser("lexicon", help="word-pattern lexicon")
    lsub = s.add_subparsers(dest="lexicon_cmd", required=True, metavar="command")
    s = lsub.add_parser("harvest", parents=[common], help="harvest a lexicon from labels")
    s.add_argument("--labels", required=True)
    s.add_argument("--min-count", type=int, default=5)
    s.add_argument("--n-subwords", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_lexicon)

    s = sub.add_parser("lm", help="word-pattern language model")
    msub = s.add_subparsers(dest="lm_cmd", required=True, metavar="command")
    s = msub.add_parser("estimate", parents=[common], help="Witten-Bell N-gram LM in ARPA format")
    s.add_argument("--labels", required=True)
    s.add_argument("--order", type=int, default=2)
    s.add_argument("--lexicon")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_lm)

    s = sub.add_parser("mine", parents=[common], help="frequent, context-rich subword strings")
    s.add_argument("--labels", required=True)
    s.add_argument("--min-count", type=int, default=5)
    s.add_argument("--min-entropy", type=float, default=1.0)
    s.add_argument("--min-len", type=int, default=2)
    s.add_argument("--max-len", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_mine)

    s = sub.add_parser("run", parents=[common], help="initialisation followed by stages I, II and III")
    s.add_argument("--features", required=True)
    s.add_argument("--config")
    s.add_argument("--workdir", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("synth", parents=[common], help="synthetic corpus with ground truth")
    s.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--models-out", help="write the generator's unit HMMs")
    s.add_argument("--labels-out", help="write the true labels (units as subwords)")
    s.add_argument("--queries-out")
    s.add_argument("--relevance-out")
    s.add_argument("--n-queries", type=int, default=20)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("eval", parents=[common], help="score labels against synthetic ground truth")
    s.add_argument("what", choices=["map", "accuracy"])
    s.add_argument("--labels", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("std", help="spoken term detection")
    ssub = s.add_subparsers(dest="std_cmd", required=True, metavar="step")
    t = ssub.add_parser("table", parents=[common], help="model distance table")
    t.add_argument("--models", required=True)
    t.add_argument("--out", required=True)
    t = ssub.add_parser("search", parents=[common], help="rank utterances for every query")
    t.add_argument("--table", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--queries", required=True)
    t.add_argument("--out", required=True)
    t = ssub.add_parser("fuse", parents=[common], help="weighted sum of two systems' distances")
    t.add_argument("--ds", required=True, help="supervised ranks")
    t.add_argument("--du", required=True, help="unsupervised ranks")
    t.add_argument("--lambda", dest="lam", type=float, required=True)
    t.add_argument("--out", help="ranks file (default: ranks go into the report)")
    t = ssub.add_parser("eval", parents=[common], help="MAP, P@5 and P@10")
    t.add_argument("--ranks", required=True)
    t.add_argument("--rel", required=True)
    t.add_argument("--out")
    s.set_defaults(fn=cmd_std)
    return p


def dispatch(argv=None) -> int:
    parser = make_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Reporter(a.json)
    try:
        return a.fn(a, out) or 0
    except ConfigError as exc:
        _error(a, "config", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes exit code 1
        _error(a, type(exc).__name__, exc)
        return 1


def _error(a, kind, exc):
    if a.json:
        print(json.dumps({"error": str(exc), "kind": kind}, sort_keys=True), file=sys.stderr)
    else:
        print(f"error ({kind}): {exc}", file=sys.stderr)


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
