import numpy as np
import numpy.testing as npt
import pytest

from specreid import data as data_mod
from specreid import train as train_mod
from specreid.config import build_run_config
from specreid.errors import ConfigError, DataError
from specreid.network import ReidModel, model_from_meta, peek_checkpoint_meta

MICRO_OVERRIDES = {
    "model.image_hw": "16x32",
    "model.embed_dim": "16",
    "model.depth": "2",
    "model.heads": "2",
    "proxy.mid_dim": "32",
    "data.n_identities": "4",
    "data.samples_per_identity": "4",
    "data.image_hw": "16x32",
    "train.p": "2",
    "train.k": "2",
    "train.steps": "8",
    "train.log_every": "2",
}


def _cfg(**extra):
    overrides = dict(MICRO_OVERRIDES)
    overrides.update({k: str(v) for k, v in extra.items()})
    return build_run_config(overrides)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = _cfg()
    data_mod.generate(cfg.data, root, split="train")
    eval_cfg = build_run_config(dict(MICRO_OVERRIDES, **{"data.seq_offset": "4"}))
    data_mod.generate(eval_cfg.data, root, split="eval")
    return root


def test_training_products(corpus, tmp_path):
    run_dir = tmp_path / "run"
    summary = train_mod.run_training(_cfg(), corpus, run_dir, progress=lambda s: None)
    assert summary["checkpoint"].exists()
    assert summary["steps"] == 8
    assert np.isfinite(summary["final_loss"])

    echoed = (run_dir / "config.txt").read_text()
    assert "model.embed_dim = 16" in echoed
    log = (run_dir / "train_log.txt").read_text().strip().splitlines()
    assert len(log) == 4  # every 2nd step of 8
    assert log[0].startswith("step=2 ")
    assert "total=" in log[0] and "vit.rgb.id=" in log[0]

    meta = peek_checkpoint_meta(summary["checkpoint"])
    assert meta["step"] == 8
    assert meta["config"]["model"]["embed_dim"] == 16


def test_training_loss_decreases(corpus, tmp_path):
    run_dir = tmp_path / "run"
    train_mod.run_training(_cfg(**{"train.steps": 30, "train.log_every": 1}),
                           corpus, run_dir, progress=lambda s: None)
    lines = (run_dir / "train_log.txt").read_text().strip().splitlines()
    totals = [float(dict(p.split("=") for p in l.split()[2:])["total"]) for l in lines]
    assert totals[-1] < totals[0]
    # robust decrease, not one lucky endpoint: late mean below early mean
    assert np.mean(totals[-5:]) < np.mean(totals[:5])


def test_training_is_deterministic(corpus, tmp_path):
    a = train_mod.run_training(_cfg(), corpus, tmp_path / "a", progress=lambda s: None)
    b = train_mod.run_training(_cfg(), corpus, tmp_path / "b", progress=lambda s: None)
    ca = np.load(a["checkpoint"])
    cb = np.load(b["checkpoint"])
    assert set(ca.files) == set(cb.files)
    for name in ca.files:
        if name == "_meta":
            continue
        npt.assert_array_equal(ca[name], cb[name], err_msg=name)


def test_resume_reproduces_uninterrupted_run(corpus, tmp_path):
    whole = train_mod.run_training(_cfg(**{"train.steps": 8}), corpus,
                                   tmp_path / "whole", progress=lambda s: None)
    half = train_mod.run_training(_cfg(**{"train.steps": 4}), corpus,
                                  tmp_path / "half", progress=lambda s: None)
    resumed = train_mod.run_training(_cfg(**{"train.steps": 8}), corpus,
                                     tmp_path / "half2", resume=half["checkpoint"],
                                     progress=lambda s: None)
    cw = np.load(whole["checkpoint"])
    cr = np.load(resumed["checkpoint"])
    for name in cw.files:
        if name == "_meta":
            continue
        npt.assert_array_equal(cw[name], cr[name], err_msg=name)


def test_resume_past_end_rejected(corpus, tmp_path):
    done = train_mod.run_training(_cfg(), corpus, tmp_path / "d", progress=lambda s: None)
    with pytest.raises(ConfigError, match="already"):
        train_mod.run_training(_cfg(), corpus, tmp_path / "d2",
                               resume=done["checkpoint"], progress=lambda s: None)


def test_evaluation_products(corpus, tmp_path):
    summary = train_mod.run_training(_cfg(), corpus, tmp_path / "t", progress=lambda s: None)
    out = train_mod.run_evaluation(_cfg(), corpus, tmp_path / "e",
                                   summary["checkpoint"], progress=lambda s: None)
    metrics = (tmp_path / "e" / "metrics.txt").read_text().strip().splitlines()
    assert len(metrics) == 6  # default mode list
    for line in metrics:
        fields = dict(p.split("=") for p in line.split())
        assert 0.0 <= float(fields["map"]) <= 1.0
        assert 0.0 <= float(fields["rank1"]) <= 1.0
    assert set(out["metrics"]) == {
        "rgb", "nir", "tir", "proxy", "rgb+nir+tir", "rgb+nir+tir+proxy"}
    quality = (tmp_path / "e" / "quality.txt").read_text()
    assert "group=all" in quality
    distances = (tmp_path / "e" / "distances.txt").read_text()
    assert "intra_mean" in distances
    assert out["rankings"].shape == (16, 3)


def test_evaluation_skips_proxy_modes_without_proxy(corpus, tmp_path):
    cfg = _cfg(**{"proxy.enabled": "false", "cem.primary_enabled": "false",
                  "cem.proxy_enabled": "false"})
    summary = train_mod.run_training(cfg, corpus, tmp_path / "t", progress=lambda s: None)
    out = train_mod.run_evaluation(cfg, corpus, tmp_path / "e",
                                   summary["checkpoint"], progress=lambda s: None)
    metrics = (tmp_path / "e" / "metrics.txt").read_text()
    assert "skipped=proxy_disabled" in metrics
    assert set(out["metrics"]) == {"rgb", "nir", "tir", "rgb+nir+tir"}
    assert out["rankings"] is None


def test_eval_uses_checkpoint_architecture(corpus, tmp_path):
    # config passed to eval has a different embed_dim; the checkpoint wins
    summary = train_mod.run_training(_cfg(), corpus, tmp_path / "t", progress=lambda s: None)
    eval_cfg = _cfg(**{"model.embed_dim": 32})
    out = train_mod.run_evaluation(eval_cfg, corpus, tmp_path / "e",
                                   summary["checkpoint"], progress=lambda s: None)
    assert out["metrics"]["rgb"].n_queries > 0


def test_rank_dump(corpus, tmp_path):
    summary = train_mod.run_training(_cfg(), corpus, tmp_path / "t", progress=lambda s: None)
    path = train_mod.run_rank_dump(_cfg(), corpus, tmp_path / "r",
                                   summary["checkpoint"], split="eval", top_k=3,
                                   progress=lambda s: None)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 16
    for line in lines:
        left, right = line.split(" -> ")
        neighbours = right.split()
        assert len(neighbours) == 3
        assert left not in {n[1:] for n in neighbours}  # self excluded
        assert all(n[0] in "+-" for n in neighbours)


def test_gradcheck_runner():
    ok, results = train_mod.run_gradcheck(entries_per_param=1, progress=lambda s: None)
    assert ok
    assert any(r.name.startswith("op.") for r in results)
    assert any(not r.name.startswith("op.") for r in results)


def test_model_from_meta_round_trip(corpus, tmp_path):
    summary = train_mod.run_training(_cfg(), corpus, tmp_path / "t", progress=lambda s: None)
    meta = peek_checkpoint_meta(summary["checkpoint"])
    model = model_from_meta(meta)
    assert isinstance(model, ReidModel)
    assert model.cfg.embed_dim == 16
    with pytest.raises(DataError):
        model_from_meta({"config": {}})
