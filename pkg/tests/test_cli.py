import json

import numpy as np
import pytest

from faps_lab import cli
from faps_lab.config import ConfigError, RunConfig
from faps_lab.formats import read_feature_file
from faps_lab.report import ProjectionExport, validate_report
from faps_lab.synth import Corpus, manifest_digest
from faps_lab.training import load_checkpoint

TINY = {
    "corpus": {"groups": 20, "base_speakers": 3, "lws_count": 2, "feature_dim": 4, "content_dim": 3,
               "speaker_dim": 2, "phoneme_count": 8, "holdout_fraction": 0.25},
    "encoder": {"input_dim": 4, "model_dim": 8, "block_count": 1},
    "training": {"step_count": 6, "batch_size": 4, "crop_frames": 8, "log_interval": 2,
                 "checkpoint_interval": 3},
    "decoder": {"feature_dim": 4, "speaker_dim": 2, "hidden_dim": 8, "steps": 20, "batch_frames": 64},
    "eval": {"pair_sample_count": 40, "align_pair_count": 25, "conversion_pair_count": 20,
             "probe_steps": 30, "projection_speakers": 3, "projection_frames": 10},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture
def corpus(tmp_path, cfg_path):
    out = tmp_path / "corpus"
    assert cli.main(["synth", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


@pytest.fixture
def run(tmp_path, cfg_path, corpus):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus), "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_defaults_roundtrip(self):
        cfg = RunConfig()
        assert RunConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.training.alpha == 1.0 and cfg.training.beta == 0.5

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig.from_dict({"bogus": {}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="learning_rat"):
            RunConfig.from_dict({"training": {"learning_rat": 0.1}})

    def test_dim_mismatch(self):
        with pytest.raises(ConfigError, match="input_dim"):
            RunConfig.from_dict({"encoder": {"input_dim": 5}})

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"training": {"batch_size": 3}})

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.json"):
            RunConfig.load(tmp_path / "nope.json")

    def test_bad_json(self, tmp_path):
        (tmp_path / "x.json").write_text("{")
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "x.json")


class TestSynth:
    def test_creates_manifest(self, corpus):
        assert len(Corpus.open(corpus)) == 20

    def test_rerun_same_hash(self, tmp_path, cfg_path, corpus, capsys):
        cli.main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "again")])
        assert manifest_digest(corpus) == manifest_digest(tmp_path / "again")
        assert (corpus / "manifest.json").read_bytes() == (tmp_path / "again" / "manifest.json").read_bytes()

    def test_seed_flag_overrides(self, tmp_path, cfg_path, corpus):
        cli.main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "s9"), "--seed", "9"])
        assert json.loads((tmp_path / "s9" / "manifest.json").read_text())["seed"] == 9
        assert manifest_digest(corpus) != manifest_digest(tmp_path / "s9")

    def test_missing_config_names_path(self, tmp_path, capsys):
        code = cli.main(["synth", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "c")])
        assert code == cli.EXIT_IO
        assert "absent.json" in capsys.readouterr().err

    def test_unknown_key_is_config_error(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"corpus": {"grups": 3}}))
        assert cli.main(["synth", "--config", str(p), "--out", str(tmp_path / "c")]) == cli.EXIT_INVALID
        assert "grups" in capsys.readouterr().err

    def test_threads_env(self, tmp_path, cfg_path, corpus, monkeypatch):
        monkeypatch.setenv("FAPS_LAB_THREADS", "3")
        cli.main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "t")])
        assert manifest_digest(corpus) == manifest_digest(tmp_path / "t")


class TestTrain:
    def test_outputs(self, run):
        assert (run / "encoder.avn").exists() and (run / "train.log").exists()
        assert (run / "checkpoint-000003.avn").exists()
        h = load_checkpoint(run / "encoder.avn").header
        assert h["run_config"]["training"]["step_count"] == 6

    def test_flags_echoed(self, tmp_path, cfg_path, corpus):
        out = tmp_path / "abl"
        cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus), "--out", str(out),
                  "--no-comp-loss", "--no-lws"])
        t = load_checkpoint(out / "encoder.avn").header["training"]
        assert t["comp_loss_enabled"] is False and t["lws_in_training"] is False

    def test_byte_identical_rerun(self, tmp_path, cfg_path, corpus, run):
        out = tmp_path / "again"
        cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus), "--out", str(out)])
        for name in ("encoder.avn", "train.log", "checkpoint-000006.avn"):
            assert (run / name).read_bytes() == (out / name).read_bytes()

    def test_resume(self, tmp_path, cfg_path, corpus, run):
        out = tmp_path / "resumed"
        cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus), "--out", str(out), "--steps", "3"])
        cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus), "--out", str(out), "--resume"])
        assert (run / "train.log").read_bytes() == (out / "train.log").read_bytes()
        a, b = load_checkpoint(run / "encoder.avn"), load_checkpoint(out / "encoder.avn")
        assert all(a[n].value.tobytes() == b[n].value.tobytes() for n in a.tensors)

    def test_decoder_stage(self, tmp_path, cfg_path, corpus, run):
        assert cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus), "--out", str(run),
                         "--stage", "decoder"]) == 0
        assert (run / "decoder.vcl").exists()

    def test_missing_corpus(self, tmp_path, cfg_path):
        assert cli.main(["train", "--config", str(cfg_path), "--corpus", str(tmp_path / "none"),
                         "--out", str(tmp_path / "r")]) == cli.EXIT_IO


class TestEval:
    def test_report(self, tmp_path, cfg_path, corpus, run, capsys):
        out = tmp_path / "report.json"
        assert cli.main(["eval", "--config", str(cfg_path), "--corpus", str(corpus),
                         "--checkpoint", str(run / "encoder.avn"), "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        validate_report(doc)
        assert doc["distance"]["pair_count"] == 40
        assert "reduction_ratio" in doc["distance"]
        assert {"raw", "avenet", "raw_shuffled"} <= set(doc["probe"])
        assert doc["config"]["run"]["eval"]["pair_sample_count"] == 40
        assert capsys.readouterr().out == out.read_text()

    def test_identity_checkpoint_ratio_one(self, tmp_path, cfg_path, corpus):
        from faps_lab.encoder import EncoderConfig, EncoderParams
        from faps_lab.training import save_checkpoint
        save_checkpoint(EncoderParams.init(EncoderConfig(**TINY["encoder"])), tmp_path / "id.avn")
        out = tmp_path / "r.json"
        cli.main(["eval", "--config", str(cfg_path), "--corpus", str(corpus), "--checkpoint",
                  str(tmp_path / "id.avn"), "--no-probe", "--pairs", "30", "--out", str(out)])
        doc = json.loads(out.read_text())
        assert doc["distance"]["reduction_ratio"] == pytest.approx(1.0, abs=1e-6)
        assert doc["distance"]["pair_count"] == 30

    def test_rerun_identical(self, tmp_path, cfg_path, corpus, run):
        for name in ("a.json", "b.json"):
            cli.main(["eval", "--config", str(cfg_path), "--corpus", str(corpus), "--no-probe",
                      "--checkpoint", str(run / "encoder.avn"), "--out", str(tmp_path / name)])
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_with_decoder_and_compare(self, tmp_path, cfg_path, corpus, run):
        cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus), "--out", str(run),
                  "--stage", "decoder"])
        out = tmp_path / "r.json"
        assert cli.main(["eval", "--config", str(cfg_path), "--corpus", str(corpus), "--no-probe",
                         "--checkpoint", str(run / "encoder.avn"), "--decoder", str(run / "decoder.vcl"),
                         "--compare", f"other={run / 'checkpoint-000003.avn'}", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["conversion"]["pair_count"] == 20
        assert set(doc["extra"]["unseen_blends"]) == {"reference", "other"}

    def test_corrupt_checkpoint(self, tmp_path, cfg_path, corpus, capsys):
        (tmp_path / "bad.avn").write_bytes(b"AVN1\x01")
        assert cli.main(["eval", "--config", str(cfg_path), "--corpus", str(corpus),
                         "--checkpoint", str(tmp_path / "bad.avn")]) == cli.EXIT_IO


class TestAlign:
    def write(self, path, rows):
        path.write_text("".join(f"{l}\t{s:.6f}\t{e:.6f}\n" for l, s, e in rows))
        return str(path)

    def test_shift(self, tmp_path, capsys):
        a = self.write(tmp_path / "a.tsv", [("a", 0, 0.06), ("b", 0.06, 0.1)])
        b = self.write(tmp_path / "b.tsv", [("a", 0.01, 0.07), ("b", 0.07, 0.11)])
        assert cli.main(["align", a, b]) == 0
        assert json.loads(capsys.readouterr().out)["alignment"]["e_avg"] == pytest.approx(0.01, abs=1e-12)

    def test_skip_labels(self, tmp_path, capsys):
        a = self.write(tmp_path / "a.tsv", [("sil", 0, 0.02), ("a", 0.02, 0.06)])
        b = self.write(tmp_path / "b.tsv", [("sil", 0, 0.04), ("a", 0.04, 0.06)])
        cli.main(["align", a, b, "--skip-labels", "sil"])
        assert json.loads(capsys.readouterr().out)["alignment"]["e_avg"] == pytest.approx(0.01)

    def test_malformed_names_line(self, tmp_path, capsys):
        a = self.write(tmp_path / "a.tsv", [("a", 0, 0.06)])
        b = tmp_path / "b.tsv"
        b.write_text("a\t0.000000\t0.060000\nb\t0.1\n")
        assert cli.main(["align", a, str(b)]) == cli.EXIT_INVALID
        assert "line 2" in capsys.readouterr().err

    def test_non_parallel(self, tmp_path):
        a = self.write(tmp_path / "a.tsv", [("a", 0, 0.06)])
        b = self.write(tmp_path / "b.tsv", [("b", 0, 0.06)])
        assert cli.main(["align", a, b]) == cli.EXIT_INVALID

    def test_corpus_mode(self, tmp_path, cfg_path, corpus):
        out = tmp_path / "a.json"
        assert cli.main(["align", "--config", str(cfg_path), "--corpus", str(corpus), "--out", str(out)]) == 0
        doc = json.loads(out.read_text())["alignment"]
        assert doc["pair_count"] == 25 and doc["e_avg"] == 0.0


class TestConvert:
    def test_convert(self, tmp_path, cfg_path, corpus, run, capsys):
        cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus), "--out", str(run),
                  "--stage", "decoder"])
        capsys.readouterr()
        src = corpus / "groups" / "g00019" / "spk00.fpk"
        out = tmp_path / "conv.fpk"
        code = cli.main(["convert", "--config", str(cfg_path), "--corpus", str(corpus),
                         "--encoder", str(run / "encoder.avn"), "--decoder", str(run / "decoder.vcl"),
                         "--source", str(src), "--target", "spk01", "--out", str(out),
                         "--report", str(tmp_path / "m.json")])
        assert code == 0
        conv = read_feature_file(out)
        assert conv.shape == read_feature_file(src).shape and conv.provenance == "raw"
        m = json.loads((tmp_path / "m.json").read_text())["conversion"]
        assert {"l1_source_target", "l1_converted_target"} <= set(m)

        code = cli.main(["convert", "--config", str(cfg_path), "--corpus", str(corpus),
                         "--encoder", str(run / "encoder.avn"), "--decoder", str(run / "decoder.vcl"),
                         "--source", str(src), "--target", "spk99", "--out", str(out)])
        assert code == cli.EXIT_INVALID
        assert "spk99" in capsys.readouterr().err


class TestProject:
    def test_csv(self, tmp_path, cfg_path, corpus, run):
        out = tmp_path / "p.csv"
        args = ["project", "--config", str(cfg_path), "--corpus", str(corpus),
                "--checkpoint", str(run / "encoder.avn"), "--out", str(out)]
        assert cli.main(args) == 0
        first = out.read_bytes()
        exp = ProjectionExport.from_csv(first.decode())
        assert len(exp.rows) == 3 * 10 * 3
        assert {r.representation_tag for r in exp.rows} == {"origin", "avenet", "average"}
        cli.main(args)
        assert out.read_bytes() == first


def test_help_lists_every_flag(capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, sp in sub.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)


def test_numerical_abort_exit_code(tmp_path, cfg_path, corpus, monkeypatch):
    from faps_lab import training

    def boom(*a, **k):
        raise training.NumericalAbort("loss is nan")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--config", str(cfg_path), "--corpus", str(corpus),
                     "--out", str(tmp_path / "r")]) == cli.EXIT_NUMERIC
