import numpy as np
import pytest

from specreid.cli import main

MICRO_SETS = [
    "--set", "model.image_hw=16x32",
    "--set", "model.embed_dim=16",
    "--set", "model.depth=2",
    "--set", "model.heads=2",
    "--set", "proxy.mid_dim=32",
    "--set", "data.n_identities=4",
    "--set", "data.samples_per_identity=4",
    "--set", "data.image_hw=16x32",
    "--set", "train.p=2",
    "--set", "train.k=2",
    "--set", "train.steps=6",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    data = ws / "data"
    assert main(["synth", "--out", str(data)] + MICRO_SETS) == 0
    assert main(["synth", "--out", str(data), "--split", "eval",
                 "--set", "data.seq_offset=4"] + MICRO_SETS) == 0
    assert main(["train", "--data", str(data), "--runs-dir", str(ws / "runs"),
                 "--name", "base"] + MICRO_SETS) == 0
    return ws


def test_synth_then_train_products(workspace):
    assert (workspace / "data" / "train" / "rgb").is_dir()
    assert (workspace / "data" / "eval" / "meta.json").exists()
    assert (workspace / "runs" / "base" / "checkpoint.npz").exists()
    assert (workspace / "runs" / "base" / "config.txt").exists()


def test_eval_and_rank_commands(workspace):
    ckpt = str(workspace / "runs" / "base" / "checkpoint.npz")
    data = str(workspace / "data")
    runs = str(workspace / "runs")
    assert main(["eval", "--data", data, "--checkpoint", ckpt,
                 "--runs-dir", runs, "--name", "base"] + MICRO_SETS) == 0
    assert (workspace / "runs" / "base" / "metrics.txt").exists()
    assert main(["rank", "--data", data, "--checkpoint", ckpt,
                 "--runs-dir", runs, "--name", "base", "--top-k", "3"] + MICRO_SETS) == 0
    dump = (workspace / "runs" / "base" / "rank_dump.txt").read_text()
    assert len(dump.strip().splitlines()) == 16


def test_runs_dir_env_var(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SPECREID_RUNS_DIR", str(tmp_path / "envruns"))
    ckpt = str(workspace / "runs" / "base" / "checkpoint.npz")
    assert main(["eval", "--data", str(workspace / "data"), "--checkpoint", ckpt,
                 "--name", "viaenv"] + MICRO_SETS) == 0
    assert (tmp_path / "envruns" / "viaenv" / "metrics.txt").exists()


def test_config_file_plus_set_override(workspace, tmp_path, capsys):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "model.image_hw = 16x32\nmodel.embed_dim = 16\nmodel.depth = 2\n"
        "model.heads = 2\nproxy.mid_dim = 32\ndata.n_identities = 4\n"
        "data.samples_per_identity = 4\ndata.image_hw = 16x32\n"
        "train.p = 2\ntrain.k = 2\ntrain.steps = 6\n"
    )
    out = tmp_path / "d2"
    assert main(["synth", "--out", str(out), "--config", str(cfg_file),
                 "--set", "data.n_identities=3"]) == 0
    line = capsys.readouterr().out
    assert "12 samples" in line  # 3 ids x 4 samples: --set beat the file


def test_exit_code_2_for_config_problems(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"),
                 "--set", "model.width=4"]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path / "x"),
                 "--set", "data.scenario=fog"]) == 2
    assert main(["train", "--data", str(tmp_path), "--name", "n",
                 "--config", str(tmp_path / "absent.cfg")]) == 2


def test_exit_code_3_for_data_problems(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--runs-dir",
                 str(tmp_path / "runs"), "--name", "x"] + MICRO_SETS[:-2]) == 3
    assert "data error" in capsys.readouterr().err
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--data", str(tmp_path / "nowhere"), "--checkpoint",
                 str(bad), "--runs-dir", str(tmp_path / "runs"), "--name", "x"]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_code_4_for_numeric_blowup(workspace, tmp_path, capsys):
    # a huge learning rate overflows the forward pass within a few steps
    code = main(["train", "--data", str(workspace / "data"),
                 "--runs-dir", str(tmp_path / "runs"), "--name", "boom"]
                + MICRO_SETS + ["--set", "optim.lr=1e9", "--set", "train.steps=30"])
    assert code == 4
    assert "numeric failure" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--entries", "1"]) == 0
    assert "gradient check passed" in capsys.readouterr().out
