import json

import pytest

from acoustic_patterns.cli import dispatch
from acoustic_patterns.labels import load_labels
from acoustic_patterns.lexicon import load_lexicon


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    (d / "spec.toml").write_text("n_utterances = 30\nn_units = 4\nn_words = 5\n")
    code = dispatch(
        [
            "synth", "--spec", str(d / "spec.toml"), "--out", str(d / "f.pff"), "--truth", str(d / "t.json"),
            "--labels-out", str(d / "tl.json"), "--models-out", str(d / "th.json"),
            "--queries-out", str(d / "q.json"), "--relevance-out", str(d / "r.tsv"), "--n-queries", "3",
            "--workers", "1",
        ]
    )
    assert code == 0
    return d


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert run(capsys, "bogus")[0] == 2

    def test_help(self, capsys):
        code, out, _ = run(capsys, "run", "--help")
        assert code == 0 and "--workdir" in out

    def test_missing_required(self, capsys):
        assert run(capsys, "run", "--features", "x.pff")[0] == 2

    def test_bad_toml(self, capsys, tmp_path, synth_dir):
        (tmp_path / "bad.toml").write_text("x = [\n")
        code, _, err = run(capsys, "run", "--features", synth_dir / "f.pff", "--config", tmp_path / "bad.toml", "--workdir", tmp_path / "w")
        assert code == 2 and "config" in err

    def test_unknown_config_key(self, capsys, tmp_path, synth_dir):
        (tmp_path / "c.toml").write_text("I_q = 3\n")
        code, _, err = run(capsys, "run", "--features", synth_dir / "f.pff", "--config", tmp_path / "c.toml", "--workdir", tmp_path / "w", "--json")
        assert code == 2
        assert json.loads(err)["kind"] == "config"

    def test_nested_config_rejected(self, capsys, tmp_path, synth_dir):
        (tmp_path / "c.toml").write_text("[hmm]\nem_iters = 2\n")
        assert run(capsys, "run", "--features", synth_dir / "f.pff", "--config", tmp_path / "c.toml", "--workdir", tmp_path / "w")[0] == 2

    def test_missing_file(self, capsys, tmp_path, synth_dir):
        code, _, err = run(capsys, "eval", "map", "--labels", tmp_path / "nope.json", "--truth", synth_dir / "t.json")
        assert code == 1 and "FileNotFoundError" in err

    def test_negative_workers(self, capsys):
        assert run(capsys, "lexicon", "harvest", "--labels", "x", "--out", "y", "--workers", "-1")[0] == 2


class TestCommands:
    def test_synth_outputs(self, synth_dir):
        for name in ("f.pff", "t.json", "tl.json", "th.json", "q.json", "r.tsv"):
            assert (synth_dir / name).stat().st_size > 0

    def test_eval_truth_is_perfect(self, capsys, synth_dir):
        code, out, _ = run(capsys, "eval", "accuracy", "--labels", synth_dir / "tl.json", "--truth", synth_dir / "t.json", "--json")
        assert code == 0
        assert json.loads(out) == {"frame_purity": 1.0, "unit_accuracy": 1.0}

    def test_text_report(self, capsys, synth_dir):
        code, out, _ = run(capsys, "eval", "accuracy", "--labels", synth_dir / "tl.json", "--truth", synth_dir / "t.json")
        assert code == 0
        assert out.splitlines() == ["frame_purity: 1", "unit_accuracy: 1"]

    def test_lexicon_and_lm(self, capsys, synth_dir, tmp_path):
        code, out, _ = run(capsys, "lexicon", "harvest", "--labels", synth_dir / "tl.json", "--min-count", 1, "--out", tmp_path / "lex.json", "--json")
        assert code == 0
        lex = load_lexicon(tmp_path / "lex.json")
        assert json.loads(out)["entries"] == len(lex)
        code, _, _ = run(capsys, "lm", "estimate", "--labels", synth_dir / "tl.json", "--lexicon", tmp_path / "lex.json", "--out", tmp_path / "lm.arpa")
        assert code == 0
        text = (tmp_path / "lm.arpa").read_text()
        assert "\\data\\\n" in text and text.endswith("\\end\\\n")

    def test_decode_with_true_models(self, capsys, synth_dir, tmp_path):
        run(capsys, "lexicon", "harvest", "--labels", synth_dir / "tl.json", "--min-count", 10**9, "--out", tmp_path / "s.json")
        code, _, _ = run(capsys, "decode", "--features", synth_dir / "f.pff", "--models", synth_dir / "th.json", "--lexicon", tmp_path / "s.json", "--out", tmp_path / "d.json", "--workers", 1)
        assert code == 0
        code, out, _ = run(capsys, "eval", "accuracy", "--labels", tmp_path / "d.json", "--truth", synth_dir / "t.json", "--json")
        assert json.loads(out)["unit_accuracy"] > 0.95

    def test_run_eval_std(self, capsys, synth_dir, tmp_path):
        (tmp_path / "cfg.toml").write_text("I_a = 2\nI_l = 1\nI_x = 1\nem_iters = 2\n")
        w = tmp_path / "w"
        code, out, _ = run(capsys, "run", "--features", synth_dir / "f.pff", "--config", tmp_path / "cfg.toml", "--workdir", w, "--workers", 1, "--json")
        assert code == 0
        report = json.loads(out)
        assert 1 <= report["iterations"] <= 4
        for name in ("labels.json", "lexicon.json", "hmms.json", "lm.arpa", "ledger.csv", "checkpoint.pkl"):
            assert (w / name).exists()
        ledger = (w / "ledger.csv").read_text().splitlines()
        assert ledger[0] == "iteration,stage,lexicon_size,subword_count,word_consistency,utt_consistency"
        assert len(ledger) == report["iterations"] + 1
        assert len(load_labels(w / "labels.json")) == 30

        code, out, _ = run(capsys, "eval", "map", "--labels", w / "labels.json", "--truth", synth_dir / "t.json", "--json")
        assert code == 0
        m = json.loads(out)
        assert sum(m["majority_targets"]) == len(m["pattern_ids"])

        assert run(capsys, "std", "table", "--models", w / "hmms.json", "--out", tmp_path / "t.bin")[0] == 0
        assert run(capsys, "std", "search", "--table", tmp_path / "t.bin", "--labels", w / "labels.json", "--queries", synth_dir / "q.json", "--out", tmp_path / "ru.json")[0] == 0
        run(capsys, "std", "table", "--models", synth_dir / "th.json", "--out", tmp_path / "ts.bin")
        run(capsys, "std", "search", "--table", tmp_path / "ts.bin", "--labels", synth_dir / "tl.json", "--queries", synth_dir / "q.json", "--out", tmp_path / "rs.json")
        code, _, _ = run(capsys, "std", "fuse", "--ds", tmp_path / "rs.json", "--du", tmp_path / "ru.json", "--lambda", 0.5, "--out", tmp_path / "rf.json")
        assert code == 0
        code, out, _ = run(capsys, "std", "fuse", "--ds", tmp_path / "rs.json", "--du", tmp_path / "ru.json", "--lambda", 0.5, "--json")
        assert json.loads(out)["ranks"] == json.loads((tmp_path / "rf.json").read_text())
        code, out, _ = run(capsys, "std", "eval", "--ranks", tmp_path / "rs.json", "--rel", synth_dir / "r.tsv", "--json")
        assert code == 0
        metrics = json.loads(out)
        assert metrics["n_queries"] == 3
        # true labels contain each query's units wherever the word occurs
        rel = {}
        for line in (synth_dir / "r.tsv").read_text().splitlines():
            q, u, flag = line.split("\t")
            if flag == "1":
                rel.setdefault(q, set()).add(u)
        ranks = json.loads((tmp_path / "rs.json").read_text())
        for q, items in ranks.items():
            assert all(d == 0.0 for u, d in items if u in rel[q])
        assert 0.0 < metrics["MAP"] <= 1.0

    def test_train_and_init(self, capsys, synth_dir, tmp_path):
        code, out, _ = run(capsys, "train", "--features", synth_dir / "f.pff", "--labels", synth_dir / "tl.json", "--models-out", tmp_path / "m.json", "--em-iters", 2, "--json")
        assert code == 0
        lls = json.loads(out)["log_likelihoods"]
        assert len(lls) == 3 and lls == sorted(lls)
        code, out, _ = run(capsys, "init", "--features", synth_dir / "f.pff", "--out", tmp_path / "i.json", "--k-max", 6, "--json")
        assert code == 0
        assert 2 <= json.loads(out)["subword_patterns"] <= 6

    def test_features_extract(self, capsys, tmp_path):
        from scipy.io import wavfile
        import numpy as np

        rng = np.random.default_rng(0)
        (tmp_path / "wav").mkdir()
        for k in range(2):
            wavfile.write(tmp_path / "wav" / f"a{k}.wav", 16000, (rng.normal(0, 3000, 8000)).astype(np.int16))
        code, out, _ = run(capsys, "features", "extract", "--in", tmp_path / "wav", "--out", tmp_path / "f.pff", "--no-cmvn", "--json")
        assert code == 0
        assert json.loads(out)["utterances"] == 2

    def test_resume(self, capsys, synth_dir, tmp_path):
        (tmp_path / "cfg.toml").write_text("I_a = 1\nI_l = 1\nI_x = 0\nem_iters = 2\n")
        args = ["run", "--features", synth_dir / "f.pff", "--config", tmp_path / "cfg.toml", "--workdir", tmp_path / "w", "--workers", 1, "--json"]
        _, first, _ = run(capsys, *args)
        code, again, _ = run(capsys, *args, "--resume")
        assert code == 0 and again == first
