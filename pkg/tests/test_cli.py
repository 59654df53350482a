import csv
import json
import subprocess
import sys

import pytest

from scrl.cli import build_parser, main

SMALL = """
[train]
batch_size = 16
mlp_width = 16
mlp_depth = 1
repr_dim = 4
gamma = 0.9
total_steps = 6
steps_per_epoch = 3
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.ini").write_text(SMALL)
    assert main(["gen-data", "--env", "grid4", "--num-transitions", "800", "--seed", "1",
                 "--out", str(d / "data.scrl")]) == 0
    assert main(["train", "--config", str(d / "small.ini"), "--data", str(d / "data.scrl"),
                 "--out-dir", str(d / "run")]) == 0
    return d


def test_help_shows_defaults(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["gen-data", "--help"])
    out = capsys.readouterr().out
    assert "default: 250000" in out and "default: scripted" in out


@pytest.mark.parametrize("cmd", ["gen-data", "train", "eval", "interp", "qtrace", "ablate", "gradcheck"])
def test_every_flag_has_a_default_shown(cmd, capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args([cmd, "--help"])
    out = capsys.readouterr().out.split("options:", 1)[1]
    flags = [line.split()[0] for line in out.splitlines() if line.strip().startswith("--")]
    assert flags
    text = " ".join(out.split())
    for flag in flags:
        assert text.split(flag, 1)[1].split(" --", 1)[0].count("(default:") == 1, flag


def test_defaults_from_table(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["eval", "--help"])
    assert "rollouts, one per goal (default: 10)" in " ".join(capsys.readouterr().out.split())


def test_unwritable_output(tmp_path, capsys):
    out = tmp_path / "missing" / "dir" / "d.scrl"
    assert main(["gen-data", "--env", "grid3", "--num-transitions", "100", "--out", str(out)]) == 4
    assert str(out) in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "scrl.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--env", "grid3", "--num-transitions", "300", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_gen_data_zero_transitions(tmp_path, capsys):
    assert main(["gen-data", "--num-transitions", "0", "--out", str(tmp_path / "x")]) == 2
    assert "too few transitions" in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.ini"), "--data", str(tmp_path / "d")])
    assert code == 4 and "config file not found" in capsys.readouterr().err


def test_bad_config_key(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[train]\nbatchsize = 4\n")
    code = main(["gen-data", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "d")])
    assert code == 2 and "bad.ini:2" in capsys.readouterr().err


def test_corrupt_data(tmp_path):
    (tmp_path / "d.scrl").write_bytes(b"garbage")
    assert main(["train", "--data", str(tmp_path / "d.scrl"), "--out-dir", str(tmp_path / "r")]) == 4


def test_train_outputs(run):
    rows = list(csv.reader(open(run / "run" / "metrics.csv")))
    assert len(rows) == 1 + 6
    assert (run / "run" / "ckpt_final").exists() and (run / "run" / "ckpt_epoch1").exists()


def test_train_deterministic(run, tmp_path):
    assert main(["train", "--config", str(run / "small.ini"), "--data", str(run / "data.scrl"),
                 "--out-dir", str(tmp_path)]) == 0
    for name in ("metrics.csv", "ckpt_final"):
        assert (tmp_path / name).read_bytes() == (run / "run" / name).read_bytes()


def test_resume_matches_uninterrupted(run, tmp_path):
    assert main(["train", "--config", str(run / "small.ini"), "--data", str(run / "data.scrl"),
                 "--out-dir", str(tmp_path), "--resume", str(run / "run" / "ckpt_epoch1")]) == 0
    assert (tmp_path / "ckpt_final").read_bytes() == (run / "run" / "ckpt_final").read_bytes()


def test_eval(run, capsys):
    assert main(["eval", "--checkpoint", str(run / "run" / "ckpt_final"), "--num-goals", "3",
                 "--out-dir", str(run / "ev")]) == 0
    assert "success_rate" in capsys.readouterr().out
    assert (run / "ev" / "eval.csv").read_text().startswith("goal_index,success,steps")


def test_interp(run):
    assert main(["interp", "--checkpoint", str(run / "run" / "ckpt_final"), "--pairs", "2", "--num-alphas", "3",
                 "--out-dir", str(run / "ip")]) == 0
    out = json.load(open(run / "ip" / "interp.json"))
    assert len(out["pairs"]) == 2 and out["mean_error"] >= 0


def test_qtrace(run, capsys):
    assert main(["qtrace", "--checkpoint", str(run / "run" / "ckpt_final"), "--num-rollouts", "2",
                 "--out-dir", str(run / "qt")]) == 0
    assert "mean_spearman" in capsys.readouterr().out
    rows = list(csv.reader(open(run / "qt" / "qtrace.csv")))
    assert rows[0] == ["rollout", "t", "q_normalized"] and len(rows) > 2


def test_corrupt_checkpoint(run, tmp_path):
    raw = bytearray((run / "run" / "ckpt_final").read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "c").write_bytes(bytes(raw))
    assert main(["eval", "--checkpoint", str(tmp_path / "c")]) == 4


def test_ablate(run):
    assert main(["ablate", "--config", str(run / "small.ini"), "--data", str(run / "data.scrl"),
                 "--axis", "repr_dim", "--values", "2,4", "--seeds", "0", "--num-goals", "2",
                 "--out-dir", str(run / "ab")]) == 0
    assert len((run / "ab" / "ablation.csv").read_text().splitlines()) == 3


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck"]) == 0
    assert "15/15" in capsys.readouterr().out
