import json
from pathlib import Path

import numpy as np
import pytest

from charngram_lm.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, edit_distance, main
from charngram_lm.corpus import build_vocabulary, tokenize_lines
from charngram_lm.trainer import save_checkpoint
from conftest import TOY_LINES, tiny_model

REPO = Path(__file__).resolve().parents[1]
TINY_CONFIG = REPO / "configs" / "tiny.json"


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def checkpoint(tmp_path, model, name="model"):
    save_checkpoint(tmp_path / name, model)
    return str(tmp_path / name)


@pytest.fixture
def toy_ckpt(tmp_path):
    vocab = build_vocabulary(tokenize_lines(TOY_LINES))
    return checkpoint(tmp_path, tiny_model(vocab, dtype="float32")), vocab


@pytest.fixture
def uniform_ckpt(tmp_path):
    """Word-only model over 10,000 types with every parameter zero, so each prediction is uniform."""
    vocab = build_vocabulary([f"w{i}" for i in range(10_000)], specials=[])
    model = tiny_model(vocab, input_mode="word_only", tying="untied", encoder="none", dim=2, hidden=2,
                       dtype="float32")
    for p in model.parameters():
        p.data[...] = 0.0
    rng = np.random.default_rng(0)
    text = write_lines(tmp_path / "text.txt",
                       [" ".join(f"w{i}" for i in rng.integers(0, 10_000, 50)) for _ in range(40)])
    return checkpoint(tmp_path, model), text


class TestTrain:
    def test_tiny_config_runs(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(TINY_CONFIG), "--out-dir", str(out)]) == EXIT_OK
        cfg = json.loads(TINY_CONFIG.read_text())
        records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert len(records) == cfg["epochs"]
        assert [r["epoch"] for r in records] == list(range(1, cfg["epochs"] + 1))
        for name in ("model.json", "model.bin", "vocab.tsv", "ngrams3.tsv", "config.json", "report.json"):
            assert (out / name).exists()
        report = json.loads(capsys.readouterr().out)
        assert report["valid_ppl"] < 1.2

    def test_rerun_keeps_old_metrics(self, tmp_path):
        out = tmp_path / "run"
        args = ["train", "--config", str(TINY_CONFIG), "--out-dir", str(out), "--epochs", "1"]
        assert main(args) == EXIT_OK
        assert main(args) == EXIT_OK
        assert (out / "metrics.jsonl").exists() and (out / "metrics.1.jsonl").exists()

    def test_encoder_none_with_ngram(self, tmp_path, capsys):
        train = write_lines(tmp_path / "t.txt", TOY_LINES)
        assert main(["train", "--train", str(train), "--encoder", "none", "--ngram", "3"]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "config error" in err and "encoder" in err and "ngram" in err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": "x.txt", "embed_size": 10}))
        assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
        assert "embed_size" in capsys.readouterr().err

    def test_missing_train_file(self, tmp_path):
        assert main(["train", "--train", str(tmp_path / "absent.txt"), "--out-dir", str(tmp_path)]) == EXIT_DATA

    def test_bad_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--no-such-flag"])
        assert exc.value.code == EXIT_CONFIG

    def test_help(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--embed-dim", "--encoder", "--tying", "--input-mode", "--clip-norm"):
            assert flag in out


class TestBuildVocab:
    def test_outputs(self, tmp_path, capsys):
        train = write_lines(tmp_path / "t.txt", TOY_LINES)
        assert main(["build-vocab", str(train), "--out-dir", str(tmp_path / "v")]) == EXIT_OK
        stats = json.loads(capsys.readouterr().out)
        assert stats["vocab_size"] == len(build_vocabulary(tokenize_lines(TOY_LINES)))
        assert stats["train_tokens"] == len(tokenize_lines(TOY_LINES))
        rows = (tmp_path / "v" / "vocab.tsv").read_text().splitlines()
        assert len(rows) == stats["vocab_size"]
        assert (tmp_path / "v" / "ngrams3.tsv").exists()

    def test_empty_corpus(self, tmp_path):
        empty = write_lines(tmp_path / "e.txt", [""])
        assert main(["build-vocab", str(empty), "--no-eos", "--out-dir", str(tmp_path)]) == EXIT_DATA


class TestEval:
    def test_uniform_model(self, uniform_ckpt, capsys):
        ckpt, text = uniform_ckpt
        assert main(["eval", ckpt, str(text), "--no-eos"]) == EXIT_OK
        report = json.loads(Path(ckpt + ".eval-text.json").read_text())
        assert 9999 <= report["perplexity"] <= 10001

    def test_buckets_partition(self, uniform_ckpt, tmp_path):
        ckpt, text = uniform_ckpt
        rep = tmp_path / "r.json"
        assert main(["eval", ckpt, str(text), "--no-eos", "--freq-threshold", "2000", "--report", str(rep)]) == 0
        report = json.loads(rep.read_text())
        b = report["buckets"]
        # every training frequency is 1, so all positions land in the infrequent bucket
        assert b["frequent"] is None
        assert b["infrequent"]["positions"] == report["positions"]

    def test_buckets_split(self, toy_ckpt, tmp_path):
        ckpt, vocab = toy_ckpt
        text = write_lines(tmp_path / "text.txt", TOY_LINES * 4)
        rep = tmp_path / "r.json"
        assert main(["eval", ckpt, str(text), "--freq-threshold", "2", "--report", str(rep)]) == EXIT_OK
        report = json.loads(rep.read_text())
        b = report["buckets"]
        assert b["infrequent"]["positions"] + b["frequent"]["positions"] == report["positions"]
        total = b["infrequent"]["positions"] * b["infrequent"]["mean_nll"] + \
            b["frequent"]["positions"] * b["frequent"]["mean_nll"]
        assert total / report["positions"] == pytest.approx(report["mean_nll"], rel=1e-9)

    def test_deterministic(self, toy_ckpt, tmp_path):
        ckpt, _ = toy_ckpt
        text = write_lines(tmp_path / "text.txt", TOY_LINES * 3)
        reports = []
        for k in range(2):
            rep = tmp_path / f"r{k}.json"
            assert main(["eval", ckpt, str(text), "--freq-threshold", "2", "--report", str(rep)]) == EXIT_OK
            reports.append(rep.read_text())
        assert reports[0] == reports[1]

    def test_missing_checkpoint(self, tmp_path):
        text = write_lines(tmp_path / "text.txt", TOY_LINES)
        assert main(["eval", str(tmp_path / "nope"), str(text)]) == EXIT_DATA


class TestInspect:
    def test_grams_and_weights(self, toy_ckpt, capsys):
        ckpt, _ = toy_ckpt
        assert main(["inspect", ckpt, "the"]) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "3-grams: ^th the he$"
        rows = {l.split()[0]: float(l.split()[1]) for l in out[2:5]}
        assert list(rows) == ["^th", "the", "he$"]
        assert sum(rows.values()) == pytest.approx(1.0, abs=1e-3)  # rounded to 4 places in the table
        assert any(l.startswith("neighbours under E:") for l in out)
        assert any(l.startswith("neighbours under E+C:") for l in out)

    def test_special(self, toy_ckpt, capsys):
        ckpt, _ = toy_ckpt
        assert main(["inspect", ckpt, "<unk>"]) == EXIT_OK
        assert "special tokens have no character composition" in capsys.readouterr().out

    def test_unknown_word(self, toy_ckpt, capsys):
        ckpt, _ = toy_ckpt
        assert main(["inspect", ckpt, "thw"]) == EXIT_DATA
        err = capsys.readouterr().err
        assert "not in the vocabulary" in err and "the" in err

    def test_edit_distance(self):
        assert edit_distance("kitten", "sitting") == 3
        assert edit_distance("", "abc") == 3
        assert edit_distance("same", "same") == 0


def read_export(path):
    rows = [l.split(" ") for l in Path(path).read_text().splitlines()]
    return [r[0] for r in rows], np.array([[float(x) for x in r[1:]] for r in rows])


class TestExport:
    @pytest.fixture
    def identity_model(self, toy_vocab):
        V = len(toy_vocab)
        model = tiny_model(toy_vocab, dim=V, hidden=V, dtype="float32")
        model.params["E"].data[...] = np.eye(V)
        model.params["ngram_table"].data[...] = 0.0
        return model

    def test_identity_rows(self, identity_model, tmp_path):
        ckpt = checkpoint(tmp_path, identity_model)
        assert main(["export", ckpt, "E", str(tmp_path / "E.txt")]) == EXIT_OK
        words, M = read_export(tmp_path / "E.txt")
        assert words == identity_model.vocab.words
        assert len(words) == identity_model.config.vocab_size
        np.testing.assert_array_equal(M, np.eye(len(words)))

    def test_zero_ngrams_make_e_plus_c_equal_e(self, identity_model, tmp_path):
        ckpt = checkpoint(tmp_path, identity_model)
        assert main(["export", ckpt, "E", str(tmp_path / "E.txt")]) == EXIT_OK
        assert main(["export", ckpt, "E_plus_C", str(tmp_path / "EC.txt")]) == EXIT_OK
        assert (tmp_path / "E.txt").read_text() == (tmp_path / "EC.txt").read_text()

    def test_export_round_trips_floats(self, toy_ckpt, tmp_path):
        ckpt, vocab = toy_ckpt
        assert main(["export", ckpt, "C", str(tmp_path / "C.txt")]) == EXIT_OK
        _, M = read_export(tmp_path / "C.txt")
        assert M.shape[0] == len(vocab)
        np.testing.assert_array_equal(M[vocab.id_of["<unk>"]], 0.0)

    def test_c_without_encoder(self, toy_vocab, tmp_path, capsys):
        model = tiny_model(toy_vocab, input_mode="word_only", tying="untied", encoder="none")
        ckpt = checkpoint(tmp_path, model)
        assert main(["export", ckpt, "C", str(tmp_path / "C.txt")]) == EXIT_CONFIG
        assert "no n-gram encoder" in capsys.readouterr().err
