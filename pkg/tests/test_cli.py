import subprocess
import sys

import pytest

from factorcd.cli import main

CONFIG = """
[run]
seed = 3
out_dir = {out}
decomposition = tri-forward

[generator]
n_phonemes = 4
dim = 6
n_words = 5
word_length = 2 3
utterance_words = 1 2
noise = 0.5
n_train = 40
n_dev = 4
n_test = 4

[model]
encoder_hidden = 16 16
head_hidden = 16
dropout = 0.0

[stages]
plan = monophone
monophone_epochs = 1

[train]
epochs = 2

[decoder]
score_beam = inf
lm_scale = 2
prior_scale = 0.5

[grid]
prior_scales = 0 0.5
lm_scales = 1 2

[comparison]
rows = monophone tri-forward
seeds = 0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.ini").write_text(CONFIG.format(out=d / "out"))
    return d


def run(workdir, *args):
    return main([args[0], "--config", str(workdir / "run.ini"), *args[1:]])


def test_pipeline(workdir, capsys):
    for cmd in ("gen-data", "train", "priors", "decode", "score", "grid-search"):
        assert run(workdir, cmd) == 0, cmd
    out = capsys.readouterr().out
    assert "WER" in out and "best prior scales" in out
    hyp = (workdir / "out" / "hyp.test.txt").read_text().splitlines()
    assert len(hyp) == 4 and all(line.startswith("test") for line in hyp)
    assert (workdir / "out" / "report" / "grid.tsv").exists()
    stats = workdir / "out" / "decode_stats.test.tsv"
    assert len(stats.read_text().splitlines()) == 5


def test_explicit_file_flags(workdir, tmp_path):
    data, model, priors = tmp_path / "d", tmp_path / "m.npz", tmp_path / "p.txt"
    assert run(workdir, "gen-data", "--out", str(data)) == 0
    assert (data / "lm.arpa").exists() and (data / "test.fcd").exists()
    assert run(workdir, "train", "--corpus", str(data), "--model", str(model)) == 0
    assert run(workdir, "priors", "--corpus", str(data), "--model", str(model), "--priors", str(priors)) == 0
    out = tmp_path / "hyp.txt"
    assert run(workdir, "decode", "--corpus", str(data), "--model", str(model), "--priors", str(priors),
               "--lm", str(data / "lm.arpa"), "--output", str(out)) == 0
    assert len(out.read_text().splitlines()) == 4


def test_decode_with_mismatched_tag(workdir, capsys):
    run(workdir, "gen-data")
    assert run(workdir, "train") == 0
    code = run(workdir, "decode", "--set", "run.decomposition=tri-backward")
    err = capsys.readouterr().err
    assert code != 0 and "tri-forward" in err and "tri-backward" in err


def test_oracle_check(capsys):
    assert main(["oracle-check", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    value = float(out.split("deviation")[1].split()[0])
    assert value < 1e-10


def test_grad_check(capsys):
    assert main(["grad-check"]) == 0
    assert "max relative gradient error" in capsys.readouterr().out


def test_unknown_flag_prints_usage(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--no-such-flag"])
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code != 0


@pytest.mark.parametrize("override,needle", [("train.bogus=1", "unknown key"), ("nosection.x=1", "unknown section"),
                                             ("run.decomposition=pentaphone", "unknown tag"),
                                             ("train.epochs=many", "epochs")])
def test_invalid_config(workdir, capsys, override, needle):
    assert run(workdir, "train", "--set", override) != 0
    assert needle in capsys.readouterr().err


def test_missing_config_file(capsys):
    assert main(["train", "--config", "/nonexistent/run.ini"]) != 0
    assert "not found" in capsys.readouterr().err


def test_missing_inputs(tmp_path, capsys):
    (tmp_path / "c.ini").write_text(f"[run]\nout_dir = {tmp_path / 'empty'}\n")
    assert main(["decode", "--config", str(tmp_path / "c.ini")]) != 0
    assert "missing" in capsys.readouterr().err


def test_run_comparison_and_console_script(workdir):
    assert run(workdir, "run-comparison") == 0
    report = (workdir / "out" / "report" / "report.tsv").read_text()
    assert report.splitlines()[0].startswith("name\t") and len(report.splitlines()) == 3
    proc = subprocess.run([sys.executable, "-m", "factorcd.cli", "oracle-check", "--seed", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "resolved config" in proc.stderr
