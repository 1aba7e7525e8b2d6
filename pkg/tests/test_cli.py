"""Command line behavior: exit codes, config precedence, artifacts."""
import os

import pytest

from gapelab.cli import ConfigError, _multipliers, _on_off, main, parse_config_file
from gapelab.theory import BoundReport


def run(tmp_path, *argv, out_dir=None):
    out = str(out_dir or tmp_path)
    return main([*argv, "--out-dir", out]), out


def resolved(out_dir: str) -> str:
    return open(os.path.join(out_dir, "resolved_config.txt")).read()


TINY_TRAIN_ARGS = [
    "train", "--regime", "last", "--len", "64", "--steps-max", "8",
    "--batch-size", "4", "--warmup", "2", "--val-every", "4",
    "--val-size", "4", "--d-model", "16", "--n-layer", "1",
    "--n-head", "2", "--seed", "0",
]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One gated and one plain tiny checkpoint, shared across tests."""
    out = str(tmp_path_factory.mktemp("ckpts"))
    code = main([*TINY_TRAIN_ARGS, "--pe", "nope", "--gape", "on",
                 "--name", "gated", "--out-dir", out])
    assert code == 0
    code = main([*TINY_TRAIN_ARGS, "--pe", "nope", "--gape", "off",
                 "--name", "plain", "--out-dir", out])
    assert code == 0
    return out


class TestUsage:
    def test_bare_invocation(self, capsys):
        assert main([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_bare_niah(self, capsys):
        assert main(["niah"]) == 2
        assert "niah gen" in capsys.readouterr().err


class TestCasters:
    def test_on_off(self):
        assert _on_off("on") and _on_off("TRUE") and _on_off("1")
        assert not _on_off("off") and not _on_off("no")
        with pytest.raises(ConfigError, match="on/off"):
            _on_off("maybe")

    def test_multipliers(self):
        assert _multipliers("1,2,4") == (1, 2, 4)
        assert _multipliers((3,)) == (3,)
        with pytest.raises(ConfigError, match="bad multiplier"):
            _multipliers("1,x")
        with pytest.raises(ConfigError, match="empty"):
            _multipliers(",")


class TestConfigFile:
    def write(self, tmp_path, text):
        path = tmp_path / "settings.cfg"
        path.write_text(text)
        return str(path)

    def test_parses_comments_and_blanks(self, tmp_path):
        path = self.write(tmp_path, "# a comment\n\nseed = 9\ncount=3\n")
        assert parse_config_file(path) == {"seed": "9", "count": "3"}

    def test_unknown_key(self, tmp_path):
        path = self.write(tmp_path, "sede = 9\n")
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_file(path)

    def test_duplicate_key(self, tmp_path):
        path = self.write(tmp_path, "seed = 1\nseed = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_file(path)

    def test_missing_equals(self, tmp_path):
        path = self.write(tmp_path, "seed 9\n")
        with pytest.raises(ConfigError, match="key=value"):
            parse_config_file(path)

    def test_config_error_becomes_exit_2(self, tmp_path, capsys):
        path = self.write(tmp_path, "sede = 9\n")
        code, _ = run(tmp_path, "niah", "gen", "--config", path)
        assert code == 2
        assert "unknown key" in capsys.readouterr().err


class TestPrecedence:
    def test_cli_beats_file_beats_env_beats_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GAPE_SEED", "7")
        cfg = tmp_path / "settings.cfg"
        cfg.write_text("count = 5\nlength = 128\n")
        code, out = run(tmp_path, "niah", "gen", "--config", str(cfg),
                        "--count", "3")
        assert code == 0
        text = resolved(out)
        assert "count=3 source=cli" in text
        assert "length=128 source=file" in text
        assert "seed=7 source=env" in text
        assert "regime=last source=default" in text
        assert os.path.exists(os.path.join(out, "niah_L128_last_n3.txt"))

    def test_file_seed_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GAPE_SEED", "7")
        cfg = tmp_path / "settings.cfg"
        cfg.write_text("seed = 4\n")
        code, out = run(tmp_path, "niah", "gen", "--count", "2",
                        "--len", "64", "--config", str(cfg))
        assert code == 0
        assert "seed=4 source=file" in resolved(out)

    def test_bad_env_seed_is_exit_2(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("GAPE_SEED", "not-a-number")
        code, _ = run(tmp_path, "niah", "gen", "--count", "2", "--len", "64")
        assert code == 2
        assert "gapelab:" in capsys.readouterr().err


class TestVerify:
    def test_pass_run_writes_report(self, tmp_path, capsys):
        code, out = run(tmp_path, "verify", "--suite", "translation",
                        "--trials", "10", "--seed", "0")
        assert code == 0
        text = capsys.readouterr().out
        assert "checks passed" in text
        assert "FAIL" not in text
        report = open(os.path.join(out, "verify_report.csv")).read()
        assert report.splitlines()[0] == \
            "suite,check,trials,violations,worst_excess,tolerance,status"
        assert all(row.endswith("pass") for row in report.splitlines()[1:])

    def test_same_seed_reruns_are_byte_identical(self, tmp_path):
        args = ("verify", "--suite", "thm1", "--trials", "10", "--seed", "3")
        _, out_a = run(tmp_path, *args, out_dir=tmp_path / "a")
        _, out_b = run(tmp_path, *args, out_dir=tmp_path / "b")
        csv_a = open(os.path.join(out_a, "verify_report.csv")).read()
        csv_b = open(os.path.join(out_b, "verify_report.csv")).read()
        assert csv_a == csv_b

    def test_failing_check_is_exit_1(self, tmp_path, monkeypatch, capsys):
        bad = BoundReport(suite="thm1", check="flip", trials=5, violations=2,
                          worst_excess=0.5, tolerance=1e-9)
        monkeypatch.setattr("gapelab.cli.run_suites", lambda *a, **k: [bad])
        code, _ = run(tmp_path, "verify", "--suite", "thm1", "--trials", "5")
        assert code == 1
        assert "FAIL" in capsys.readouterr().out

    def test_unknown_suite_rejected(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["verify", "--suite", "bogus", "--out-dir", str(tmp_path)])
        assert err.value.code == 2


class TestNiahGen:
    def test_default_filename_and_determinism(self, tmp_path):
        args = ("niah", "gen", "--len", "64", "--regime", "first",
                "--count", "4", "--seed", "1")
        code, out = run(tmp_path, *args, out_dir=tmp_path / "a")
        assert code == 0
        path = os.path.join(out, "niah_L64_first_n4.txt")
        first = open(path).read()
        assert first.splitlines()[0] == "L=64 n=1 regime=first seed=1 count=4"
        code, out_b = run(tmp_path, *args, out_dir=tmp_path / "b")
        assert open(os.path.join(out_b, "niah_L64_first_n4.txt")).read() == first

    def test_explicit_out_path(self, tmp_path):
        target = str(tmp_path / "data.txt")
        code, _ = run(tmp_path, "niah", "gen", "--len", "64", "--count", "2",
                      "--out", target)
        assert code == 0
        assert os.path.exists(target)


class TestTrainEvalAnalyze:
    def test_train_artifacts(self, trained):
        assert os.path.exists(os.path.join(trained, "gated.ckpt"))
        metrics = open(os.path.join(trained, "gated_metrics.csv")).read()
        assert metrics.splitlines()[2].startswith("step,lr,train_loss,val_acc")
        text = resolved(trained)
        assert "pe=nope source=cli" in text
        assert "gape=on source=cli" in text

    def test_eval_uses_checkpoint_regime(self, trained, tmp_path, capsys):
        ckpt = os.path.join(trained, "gated.ckpt")
        code, out = run(tmp_path, "eval", "--ckpt", ckpt, "--multipliers",
                        "1,2", "--n-eval", "4", "--seed", "0")
        assert code == 0
        assert "regime=last source=ckpt" in resolved(out)
        csv_text = open(os.path.join(out, "gated_eval.csv")).read()
        lines = csv_text.splitlines()
        assert lines[0] == "pe,gape,regime,length,multiplier,n_eval,accuracy"
        assert len(lines) == 3
        assert lines[1].startswith("nope,1,last,64,1,4,")
        assert "accuracy" in capsys.readouterr().out

    def test_missing_checkpoint_is_exit_2(self, tmp_path, capsys):
        code, _ = run(tmp_path, "eval", "--ckpt", str(tmp_path / "no.ckpt"))
        assert code == 2
        capsys.readouterr()

    def test_analyze_gates(self, trained, tmp_path, capsys):
        ckpt = os.path.join(trained, "gated.ckpt")
        code, out = run(tmp_path, "analyze", "gates", "--ckpt", ckpt,
                        "--samples", "4", "--seed", "0")
        assert code == 0
        assert "landmark ratio" in capsys.readouterr().out
        gates = open(os.path.join(out, "gated_gates.csv")).read()
        assert gates.startswith("layer,head,mask_mean,")
        marks = open(os.path.join(out, "gated_landmarks.csv")).read()
        assert marks.startswith("layer,head,needle_mean,")
        assert "length=64 source=ckpt" in resolved(out)

    def test_analyze_entropy_with_baseline(self, trained, tmp_path, capsys):
        gated = os.path.join(trained, "gated.ckpt")
        plain = os.path.join(trained, "plain.ckpt")
        code, out = run(tmp_path, "analyze", "entropy", "--ckpt", gated,
                        "--baseline-ckpt", plain, "--samples", "4",
                        "--seed", "0")
        assert code == 0
        assert "final-layer mean entropy delta" in capsys.readouterr().out
        assert os.path.exists(os.path.join(out, "gated_entropy.csv"))
        delta = open(os.path.join(
            out, "gated_vs_plain_entropy_delta.csv")).read()
        assert delta.splitlines()[0] == "layer,head,delta_entropy"

    def test_analyze_channels_needs_rotation(self, trained, tmp_path, capsys):
        ckpt = os.path.join(trained, "gated.ckpt")
        code, _ = run(tmp_path, "analyze", "channels", "--ckpt", ckpt,
                      "--samples", "4")
        assert code == 2
        assert "rotary" in capsys.readouterr().err


class TestReport:
    def test_missing_directory(self, tmp_path, capsys):
        assert main(["report", "--out-dir", str(tmp_path / "nope")]) == 2
        capsys.readouterr()

    def test_empty_directory(self, tmp_path, capsys):
        assert main(["report", "--out-dir", str(tmp_path)]) == 2
        assert "nothing to report" in capsys.readouterr().err

    def test_collates_artifacts(self, trained, tmp_path, capsys):
        ckpt = os.path.join(trained, "gated.ckpt")
        code, out = run(tmp_path, "eval", "--ckpt", ckpt, "--multipliers",
                        "1", "--n-eval", "4", "--seed", "0")
        assert code == 0
        assert main(["report", "--out-dir", out]) == 0
        text = capsys.readouterr().out
        assert "== length sweep (gated_eval.csv) ==" in text
        assert "all checks passed" in text
        assert os.path.exists(os.path.join(out, "report.txt"))

    def test_verify_failures_propagate(self, tmp_path, capsys):
        (tmp_path / "verify_report.csv").write_text(
            "suite,check,trials,violations,worst_excess,tolerance,status\n"
            "thm1,flip,5,2,5.000000e-01,1.0e-09,FAIL\n"
        )
        assert main(["report", "--out-dir", str(tmp_path)]) == 1
        assert "1 checks FAILED" in capsys.readouterr().out
