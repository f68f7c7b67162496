import csv

import pytest

from fedal.cli import main

TINY = """
[run]
rounds = 1
local_epochs = 1
K = 2
coreset_steps = 1
batch_size = 4
[data]
n_clients = 2
seqs_per_client = 4
length = 64
eval_seqs_per_domain = 2
[model]
n_layers = 1
d_model = 8
patch_len = 8
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def test_train_then_eval(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--out", str(out), "--seed", "3"]) == 0
    assert (out / "checkpoints" / "round_1.ckpt").exists() and (out / "eval.csv").exists()
    assert "seed = 3" in (out / "config.snapshot").read_text()
    ev = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(out / "checkpoints" / "round_1.ckpt"), "--mask-ratio", "0.5",
                 "--out", str(ev)]) == 0
    rows = list(csv.DictReader((ev / "eval.csv").open()))
    assert float(rows[0]["mask_ratio"]) == 0.5 and float(rows[0]["mse"]) > 0


def test_sweep_and_ablate(tmp_path, cfg_file):
    assert main(["sweep", "--axis", "join_rate", "--grid", "0.5,1.0", "--config", str(cfg_file),
                 "--out", str(tmp_path / "sw")]) == 0
    assert len((tmp_path / "sw" / "sweep_join_rate.csv").read_text().splitlines()) == 3
    assert main(["ablate", "--config", str(cfg_file), "--toggle", "dbe", "--out", str(tmp_path / "ab")]) == 0
    assert (tmp_path / "ab" / "ablate.csv").read_text().startswith("variant,mse@0.75")


def test_config_errors_exit_2(tmp_path, cfg_file, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nbogus = 1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "x")]) == 2
    assert main(["sweep", "--axis", "data", "--grid", "a,b", "--out", str(tmp_path / "x")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--mask-ratio", "0.5",
                 "--out", str(tmp_path / "x")]) == 2


def test_runtime_error_exit_1(tmp_path, cfg_file):
    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(garbage), "--mask-ratio", "0.5", "--out", str(tmp_path / "x")]) == 1
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["train", "--config", str(cfg_file), "--out", str(blocker / "run")]) == 1


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--axis", "depth", "--grid", "1"])
    assert exc.value.code == 2
