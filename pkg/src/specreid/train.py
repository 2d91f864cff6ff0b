"""Run orchestration: training loop, retrieval evaluation, rank dumps,
gradient verification.

Everything a run produces lands in one directory: the echoed config,
a key=value training log, checkpoints, metrics and diagnostic dumps.
Determinism contract: the batch schedule is a function of (seed, epoch),
dropout of (seed, step), initialization of (seed,); resuming from a
checkpoint therefore reproduces the uninterrupted run bit for bit.
"""

import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import evaluation, gradcheck
from .backbone import SPECTRA, ModelConfig
from .config import RunConfig, format_config, parse_modes
from .enhance import CemConfig, cross_enhance
from .errors import ConfigError, DataError
from .losses import SGD, LossConfig, id_loss, total_loss, triplet_loss
from .network import ReidModel, model_from_meta, peek_checkpoint_meta
from .proxy import ProxyConfig


def prepare_run_dir(runs_root, name: str) -> Path:
    run_dir = Path(runs_root) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _spectrum_stacks(ds, idx=None):
    if idx is None:
        return [ds.images[s] for s in SPECTRA]
    return [ds.images[s][idx] for s in SPECTRA]


def _epoch_batches(labels, cfg: RunConfig, epoch: int):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 3, epoch]))
    return data_mod.pk_batches(labels, cfg.train.p, cfg.train.k, rng)


def run_training(cfg: RunConfig, data_root, run_dir, resume=None, progress=print) -> dict:
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(format_config(cfg))

    ds = data_mod.load_dataset(data_root, "train", image_hw=cfg.model.image_hw)
    model = ReidModel(cfg.model, cfg.proxy, cfg.cem, ds.n_classes, cfg.train.seed)
    opt = SGD(model.params, cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay)

    start_step = 0
    if resume is not None:
        meta = model.load_checkpoint(resume, opt)
        if meta["config"]["n_classes"] != ds.n_classes:
            raise DataError(
                f"checkpoint was trained with {meta['config']['n_classes']} classes, "
                f"dataset has {ds.n_classes}"
            )
        start_step = meta["step"]
        if start_step >= cfg.train.steps:
            raise ConfigError(
                f"checkpoint is already at step {start_step} >= train.steps {cfg.train.steps}"
            )

    loss_cfg = cfg.loss
    log_path = run_dir / "train_log.txt"
    log_file = open(log_path, "a")
    # epoch length depends only on the identity count, so probe it once
    batches = _epoch_batches(ds.labels, cfg, 0)
    steps_per_epoch = len(batches)
    epoch = 0
    t0 = time.time()
    last = {}
    try:
        for step in range(start_step, cfg.train.steps):
            if step // steps_per_epoch != epoch or step == start_step:
                epoch = step // steps_per_epoch
                batches = _epoch_batches(ds.labels, cfg, epoch)
            idx = batches[step % steps_per_epoch]

            rng = model.step_rng(step)
            out = model.forward(_spectrum_stacks(ds, idx), training=True, rng=rng)
            vit, enh, pxy = out.branches()
            loss, breakdown = total_loss(vit, enh, pxy, ds.labels[idx], loss_cfg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            last = breakdown

            if (step + 1) % cfg.train.log_every == 0 or step + 1 == cfg.train.steps:
                parts = " ".join(f"{k}={v:.4f}" for k, v in sorted(breakdown.items()))
                line = f"step={step + 1} epoch={epoch} {parts}"
                log_file.write(line + "\n")
                log_file.flush()
                progress(line)
            if cfg.train.checkpoint_every and (step + 1) % cfg.train.checkpoint_every == 0:
                model.save_checkpoint(run_dir / "checkpoint.npz", opt, step=step + 1)
    finally:
        log_file.close()

    final = run_dir / "checkpoint.npz"
    model.save_checkpoint(final, opt, step=cfg.train.steps)
    return {
        "checkpoint": final,
        "steps": cfg.train.steps,
        "final_loss": last.get("total", float("nan")),
        "seconds": time.time() - t0,
        "n_classes": ds.n_classes,
    }


def _quality_report(ds, rankings) -> list:
    """first-choice spectrum shares, overall and per degradation kind."""
    lines = []
    if rankings is None:
        return ["quality ranking unavailable (proxy disabled)"]
    first = rankings[:, 0]
    groups = {"all": np.ones(len(ds), dtype=bool)}
    for kind in sorted(set(ds.applied)):
        groups[kind] = np.array([a == kind for a in ds.applied])
    for name, mask in groups.items():
        n = int(mask.sum())
        if n == 0:
            continue
        shares = [float((first[mask] == s).mean()) for s in range(3)]
        lines.append(
            f"group={name} n={n} first_rgb={shares[0]:.4f} "
            f"first_nir={shares[1]:.4f} first_tir={shares[2]:.4f}"
        )
    return lines


def run_evaluation(cfg: RunConfig, data_root, run_dir, checkpoint, split="eval",
                   progress=print) -> dict:
    cfg.eval.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    meta = peek_checkpoint_meta(checkpoint)
    model = model_from_meta(meta)
    model.load_checkpoint(checkpoint)

    ds = data_mod.load_dataset(data_root, split, image_hw=model.cfg.image_hw)
    q_idx, g_idx = data_mod.query_gallery_split(ds)
    parts_all, rankings = model.extract(_spectrum_stacks(ds))

    results = {}
    lines = []
    for mode in parse_modes(cfg.eval.modes):
        name = "+".join(mode)
        if "proxy" in mode and "proxy" not in parts_all:
            lines.append(f"mode={name} skipped=proxy_disabled")
            continue
        feats = evaluation.assemble_inference_feature(parts_all, mode)
        distmat = evaluation.distance_matrix(feats[q_idx], feats[g_idx], cfg.eval.metric)
        res = evaluation.compute_map_cmc(
            distmat, ds.ids[q_idx], ds.ids[g_idx], ds.cams[q_idx], ds.cams[g_idx],
            max_rank=cfg.eval.max_rank,
        )
        results[name] = res
        ranks = " ".join(
            f"rank{k}={res.rank(k):.4f}" for k in (1, 5, 10) if k <= len(res.cmc)
        )
        lines.append(
            f"mode={name} map={res.mean_ap:.4f} {ranks} "
            f"queries={res.n_queries} valid={res.n_valid}"
        )

    quality_lines = _quality_report(ds, rankings)
    full = [m for m in parts_all if m in ("rgb", "nir", "tir", "proxy")]
    feats_all = evaluation.assemble_inference_feature(parts_all, tuple(full))
    dist = evaluation.distance_distributions(feats_all, ds.ids)

    (run_dir / "metrics.txt").write_text("\n".join(lines) + "\n")
    (run_dir / "quality.txt").write_text("\n".join(quality_lines) + "\n")
    (run_dir / "distances.txt").write_text(evaluation.format_distance_report(dist))
    for line in lines + quality_lines:
        progress(line)
    return {"metrics": results, "rankings": rankings, "dataset": ds,
            "quality_lines": quality_lines}


def run_rank_dump(cfg: RunConfig, data_root, run_dir, checkpoint, split="eval",
                  top_k: int = 10, progress=print) -> Path:
    """Self-retrieval listing: each sample's nearest neighbours."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = peek_checkpoint_meta(checkpoint)
    model = model_from_meta(meta)
    model.load_checkpoint(checkpoint)
    ds = data_mod.load_dataset(data_root, split, image_hw=model.cfg.image_hw)
    parts, _ = model.extract(_spectrum_stacks(ds))
    feats = evaluation.assemble_inference_feature(parts, tuple(parts))
    distmat = evaluation.distance_matrix(feats, feats, cfg.eval.metric)
    np.fill_diagonal(distmat, np.inf)
    order = np.argsort(distmat, axis=1, kind="stable")[:, :top_k]

    lines = []
    for i in range(len(ds)):
        neigh = []
        for j in order[i]:
            flag = "+" if ds.ids[j] == ds.ids[i] else "-"
            neigh.append(f"{flag}{ds.ids[j]:04d}_c{ds.cams[j]}_{ds.seqs[j]:03d}")
        lines.append(f"{ds.ids[i]:04d}_c{ds.cams[i]}_{ds.seqs[i]:03d} -> " + " ".join(neigh))
    path = run_dir / "rank_dump.txt"
    path.write_text("\n".join(lines) + "\n")
    progress(f"wrote {path} ({len(lines)} rows)")
    return path


# ---------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------

MICRO_MODEL = dict(image_hw=(16, 32), patch=8, embed_dim=16, depth=2, heads=2, mlp_ratio=2.0)


def _op_checks():
    rng = np.random.default_rng(0)
    cases = []

    def case(name, build, arrays):
        cases.append((name, build, arrays))

    case("matmul", lambda a, b: ad.matmul(a, b).sum(),
         [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])
    case("softmax", lambda a: ad.mul(ad.softmax_rows(a), a).sum(), [rng.normal(size=(4, 6))])
    case("log_softmax", lambda a: ad.mul(ad.log_softmax(a), a).sum(), [rng.normal(size=(3, 5))])
    case("layer_norm", lambda x, g, b: ad.mul(ad.layer_norm(x, g, b), x).sum(),
         [rng.normal(size=(3, 8)), rng.normal(size=8), rng.normal(size=8)])
    case("gelu", lambda a: ad.gelu(a).sum(), [rng.normal(size=(5, 5))])
    case("sqrt_clip", lambda a: ad.sqrt(ad.clip_min(a, 0.1)).sum(), [rng.normal(size=(4, 4))])
    case("l2_normalize", lambda a: ad.mul(ad.l2_normalize(a), a).sum(),
         [rng.normal(size=(3, 6)) + 0.2])
    case("attention", lambda t, s, w: ad.mul(cross_enhance(t, s, w), t).sum(),
         [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 2, 4)), rng.normal(size=(4, 4)) * 0.4])
    labels = np.array([0, 1, 0, 1])
    case("id_loss", lambda t: id_loss(t, labels, 0.1), [rng.normal(size=(4, 3))])
    case("triplet", lambda t: triplet_loss(t, labels, 0.4), [rng.normal(size=(4, 5))])
    return cases


def _micro_model_loss():
    cfg = ModelConfig(**MICRO_MODEL)
    model = ReidModel(cfg, ProxyConfig(mid_dim=32), CemConfig(dropout=0.0),
                      n_classes=2, seed=7)
    rng = np.random.default_rng(1)
    imgs = [rng.random((4, 3, 16, 32)) for _ in range(3)]
    labels = np.array([0, 0, 1, 1])
    lcfg = LossConfig()

    def loss_fn():
        out = model.forward(imgs, training=False)
        vit, enh, pxy = out.branches()
        loss, _ = total_loss(vit, enh, pxy, labels, lcfg)
        return loss

    return model, loss_fn


def run_gradcheck(op_tol: float = 1e-4, model_tol: float = 1e-3,
                  entries_per_param: int = 2, progress=print):
    """Finite-difference check of each op, then of the whole model.

    Returns (all_passed, results). Model parameters are spot-checked on
    a few entries each; the op suite checks every entry.
    """
    results = []
    for name, build, arrays in _op_checks():
        errs = gradcheck.check_gradients(build, arrays)
        results.append(gradcheck.CheckResult(
            name=f"op.{name}", max_rel_error=max(errs), tolerance=op_tol,
            n_entries=sum(np.asarray(a).size for a in arrays)))
        progress(f"{results[-1].name}: max_rel={results[-1].max_rel_error:.3e} "
                 f"{'ok' if results[-1].passed else 'FAIL'}")

    model, loss_fn = _micro_model_loss()
    spot = gradcheck.check_named_parameters(
        loss_fn, model.params, tol=model_tol,
        max_entries=entries_per_param, rng=np.random.default_rng(123),
    )
    worst = max(spot, key=lambda r: r.max_rel_error)
    progress(f"model.end_to_end: {len(spot)} params, worst {worst.name} "
             f"max_rel={worst.max_rel_error:.3e}")
    results.extend(spot)
    return all(r.passed for r in results), results
