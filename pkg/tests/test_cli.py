"""End-to-end tests of the command line interface, run in-process."""

import io
import json
from pathlib import Path

import pytest

import ctxbias.synthdata as S
from ctxbias.biasing import make_entry, save_list
from ctxbias.cli import main
from ctxbias.harness import report_from_json
from ctxbias.metrics import align, evaluate
from ctxbias.training import load_checkpoint

TRAIN_CONFIG = {
    "model": {"d_model": 16, "n_heads": 2, "encoder_layers": 1,
              "decoder_layers": 2, "ffw_dim": 24, "max_audio_len": 96,
              "max_text_len": 80},
    "train": {"batch_size": 4, "lr": 3e-3, "phase_a_steps": 40,
              "phase_b_steps": 15, "warmup_steps": 5, "val_size": 4},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A dataset directory, a train config file, and a trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    data.mkdir()
    lex = S.gen_lexicon(n_regular=40, rule_counts={"c_k": 2, "s_z": 2}, seed=7)
    train_utts, test_utts = S.gen_corpus(lex, n_train=24, n_test=8, seed=7)
    S.save_lexicon(data / "lexicon.jsonl", lex)
    S.save_corpus(data / "train.jsonl", train_utts)
    S.save_corpus(data / "test.jsonl", test_utts)
    config = root / "train-config.json"
    config.write_text(json.dumps(TRAIN_CONFIG))
    ckpt = root / "model.ckpt"
    rc = main(["train", "--data", str(data), "--out", str(ckpt),
               "--config", str(config), "--seed", "5"])
    assert rc == 0
    return root


def data_path(workdir, name="test.jsonl"):
    return str(workdir / "data" / name)


def ckpt_path(workdir):
    return str(workdir / "model.ckpt")


class TestGenData:
    def test_writes_dataset_files(self, tmp_path, capsys):
        out = tmp_path / "d1"
        rc = main(["gen-data", "--out", str(out), "--seed", "3",
                   "--n-regular", "60", "--n-train", "30", "--n-test", "120"])
        assert rc == 0
        for name in ("lexicon.jsonl", "train.jsonl", "test.jsonl"):
            assert (out / name).exists()
        assert capsys.readouterr().out.count("wrote") == 3

    def test_rerun_is_byte_identical(self, tmp_path):
        args = ["gen-data", "--seed", "3", "--n-regular", "60",
                "--n-train", "30", "--n-test", "120"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        for name in ("lexicon.jsonl", "train.jsonl", "test.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_invalid_sizes_fail_cleanly(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "x"), "--n-test", "2"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestTrain:
    def test_writes_checkpoint_and_loss_csv(self, workdir, capsys):
        ckpt = load_checkpoint(ckpt_path(workdir))
        assert ckpt.config.d_model == 16
        csv_path = Path(ckpt_path(workdir)).with_suffix(".losses.csv")
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "phase,step,loss"
        phases = [line.split(",")[0] for line in lines[1:]]
        assert phases.count("A") == 40 and phases.count("B") == 15

    def test_rerun_is_bit_identical(self, workdir, tmp_path):
        again = tmp_path / "again.ckpt"
        rc = main(["train", "--data", str(workdir / "data"),
                   "--out", str(again),
                   "--config", str(workdir / "train-config.json"),
                   "--seed", "5"])
        assert rc == 0
        assert again.read_bytes() == Path(ckpt_path(workdir)).read_bytes()

    def test_missing_corpus_fails_cleanly(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "x.ckpt")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_config_key_fails_cleanly(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"warp": 1}}))
        rc = main(["train", "--data", str(workdir / "data"),
                   "--out", str(tmp_path / "x.ckpt"), "--config", str(bad)])
        assert rc == 1
        assert "unknown" in capsys.readouterr().err

    def test_unknown_config_section_fails_cleanly(self, workdir, tmp_path,
                                                  capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"optimizer": {}}))
        rc = main(["train", "--data", str(workdir / "data"),
                   "--out", str(tmp_path / "x.ckpt"), "--config", str(bad)])
        assert rc == 1
        assert "sections" in capsys.readouterr().err


class TestDecode:
    def test_writes_hypotheses_in_corpus_order(self, workdir, tmp_path):
        hyps_path = tmp_path / "hyps.jsonl"
        rc = main(["decode", "--checkpoint", ckpt_path(workdir),
                   "--data", data_path(workdir), "--beam", "2",
                   "--out", str(hyps_path)])
        assert rc == 0
        rows = [json.loads(l) for l in hyps_path.read_text().splitlines()]
        utts = S.load_corpus(data_path(workdir))
        assert [r["id"] for r in rows] == [u.id for u in utts]
        assert all(isinstance(r["text"], str) for r in rows)

    def test_stdout_when_no_out_flag(self, workdir, capsys):
        rc = main(["decode", "--checkpoint", ckpt_path(workdir),
                   "--data", data_path(workdir), "--beam", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        rows = [json.loads(l) for l in out.splitlines() if l.strip()]
        assert len(rows) == len(S.load_corpus(data_path(workdir)))

    def test_gold_bias_changes_hypotheses_deterministically(self, workdir,
                                                            tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        base = ["decode", "--checkpoint", ckpt_path(workdir),
                "--data", data_path(workdir), "--beam", "2", "--bias", "gold"]
        assert main(base + ["--out", str(a)]) == 0
        assert main(base + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_bias_list_from_file(self, workdir, tmp_path):
        utts = S.load_corpus(data_path(workdir))
        blist_path = tmp_path / "list.jsonl"
        save_list(blist_path, [make_entry(w) for w in utts[0].new_words])
        rc = main(["decode", "--checkpoint", ckpt_path(workdir),
                   "--data", data_path(workdir), "--beam", "2",
                   "--bias", str(blist_path), "--out", str(tmp_path / "h.jsonl")])
        assert rc == 0

    def test_missing_checkpoint_fails_cleanly(self, workdir, tmp_path, capsys):
        rc = main(["decode", "--checkpoint", str(tmp_path / "nope.ckpt"),
                   "--data", data_path(workdir)])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestEval:
    def decode_to(self, workdir, path):
        rc = main(["decode", "--checkpoint", ckpt_path(workdir),
                   "--data", data_path(workdir), "--beam", "2",
                   "--bias", "gold", "--out", str(path)])
        assert rc == 0

    def test_scores_match_library_evaluation(self, workdir, tmp_path, capsys):
        hyps_path = tmp_path / "hyps.jsonl"
        self.decode_to(workdir, hyps_path)
        out_path = tmp_path / "metrics.json"
        rc = main(["eval", "--data", data_path(workdir),
                   "--hyps", str(hyps_path), "--out", str(out_path)])
        assert rc == 0
        printed = capsys.readouterr().out

        utts = S.load_corpus(data_path(workdir))
        hyps = {json.loads(l)["id"]: json.loads(l)["text"]
                for l in hyps_path.read_text().splitlines()}
        want = evaluate([align(u.text.split(), hyps[u.id].split())
                         for u in utts], [set(u.new_words) for u in utts])
        assert f"WER {100.0 * want.wer:.2f}%" in printed
        assert json.loads(out_path.read_text())["wer"] == want.wer

    def test_perfect_hypotheses_score_zero(self, workdir, tmp_path, capsys):
        utts = S.load_corpus(data_path(workdir))
        hyps_path = tmp_path / "perfect.jsonl"
        hyps_path.write_text("".join(
            json.dumps({"id": u.id, "text": u.text}) + "\n" for u in utts))
        rc = main(["eval", "--data", data_path(workdir), "--hyps",
                   str(hyps_path)])
        assert rc == 0
        assert "WER 0.00%" in capsys.readouterr().out

    def test_missing_id_fails_cleanly(self, workdir, tmp_path, capsys):
        utts = S.load_corpus(data_path(workdir))
        hyps_path = tmp_path / "short.jsonl"
        hyps_path.write_text(json.dumps({"id": utts[0].id, "text": "x"}) + "\n")
        rc = main(["eval", "--data", data_path(workdir), "--hyps",
                   str(hyps_path)])
        assert rc == 1
        assert "no hypothesis" in capsys.readouterr().err

    def test_unknown_id_fails_cleanly(self, workdir, tmp_path, capsys):
        utts = S.load_corpus(data_path(workdir))
        hyps_path = tmp_path / "extra.jsonl"
        rows = [{"id": u.id, "text": u.text} for u in utts]
        rows.append({"id": "mystery", "text": "x"})
        hyps_path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        rc = main(["eval", "--data", data_path(workdir), "--hyps",
                   str(hyps_path)])
        assert rc == 1
        assert "unknown ids" in capsys.readouterr().err


class TestExperiment:
    def config_file(self, workdir, tmp_path, **extra):
        obj = {"test_path": data_path(workdir),
               "checkpoint_path": ckpt_path(workdir),
               "approaches": ["no_biasing", "biasing"],
               "boosts": [0, 5], "distractors": [0], "beam_size": 2,
               "seed": 7, **extra}
        path = tmp_path / "exp.json"
        path.write_text(json.dumps(obj))
        return str(path)

    def test_runs_grid_from_config_file(self, workdir, tmp_path, capsys):
        out_path = tmp_path / "report.json"
        rc = main(["experiment", "--config",
                   self.config_file(workdir, tmp_path), "--out", str(out_path)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "no_biasing" in printed and "approach" in printed
        report = report_from_json(out_path.read_text())
        assert len(report.cells) == 1 + 2

    def test_flag_overrides_shrink_the_grid(self, workdir, tmp_path, capsys):
        out_path = tmp_path / "report.json"
        rc = main(["experiment", "--config",
                   self.config_file(workdir, tmp_path), "--boost", "0",
                   "--out", str(out_path)])
        assert rc == 0
        capsys.readouterr()
        report = report_from_json(out_path.read_text())
        assert len(report.cells) == 1 + 1

    def test_cache_makes_rerun_byte_identical(self, workdir, tmp_path, capsys):
        cache = tmp_path / "cache"
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        base = ["experiment", "--config", self.config_file(workdir, tmp_path),
                "--cache", str(cache)]
        assert main(base + ["--out", str(a)]) == 0
        assert main(base + ["--out", str(b)]) == 0
        capsys.readouterr()
        assert list(cache.glob("*.json"))
        assert a.read_bytes() == b.read_bytes()

    def test_missing_paths_fail_cleanly(self, capsys):
        rc = main(["experiment", "--boost", "0"])
        assert rc == 1
        assert "needs --data and --checkpoint" in capsys.readouterr().err

    def test_bad_boost_fails_cleanly(self, workdir, tmp_path, capsys):
        rc = main(["experiment", "--config",
                   self.config_file(workdir, tmp_path), "--boost", "0,zap"])
        assert rc == 1
        assert "boost" in capsys.readouterr().err


class TestSession:
    def test_commands_from_stdin(self, workdir, tmp_path, capsys, monkeypatch):
        log_path = tmp_path / "session.jsonl"
        monkeypatch.setattr("sys.stdin", io.StringIO("next\nquit\n"))
        rc = main(["session", "--checkpoint", ckpt_path(workdir),
                   "--data", data_path(workdir), "--beam", "2",
                   "--log", str(log_path)])
        assert rc == 0
        out = capsys.readouterr().out
        utts = S.load_corpus(data_path(workdir))
        assert f"[{utts[0].id}]" in out
        events = [json.loads(l) for l in log_path.read_text().splitlines()]
        assert events[0]["event"] == "start"
        assert any(e["event"] == "decode" for e in events)
