"""Command line entry point.

    specreid synth     --out DIR [--split NAME] [config options]
    specreid train     --data DIR --name RUN [--resume CKPT] [config options]
    specreid eval      --data DIR --checkpoint CKPT --name RUN [--split NAME]
    specreid rank      --data DIR --checkpoint CKPT --name RUN [--top-k N]
    specreid gradcheck [--entries N]

Config options everywhere: --config FILE reads key = value lines,
--set key=value overrides individual entries (repeatable). Run output
lands under --runs-dir, the SPECREID_RUNS_DIR environment variable, or
./runs, in that order of preference.

Exit codes: 0 success, 2 configuration problem, 3 data problem,
4 numeric failure, 1 anything else.
"""

import argparse
import os
import sys
from pathlib import Path

from . import data as data_mod
from . import train as train_mod
from .config import build_run_config, parse_config_text
from .errors import ConfigError, DataError, NumericError, SpecReidError


def _add_config_args(sub):
    sub.add_argument("--config", type=Path, default=None,
                     help="file of key = value lines")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override one config entry")


def _add_runs_dir(sub):
    sub.add_argument("--runs-dir", type=Path,
                     default=Path(os.environ.get("SPECREID_RUNS_DIR", "runs")),
                     help="directory that run outputs are grouped under")
    sub.add_argument("--name", required=True, help="run name (subdirectory)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specreid",
                                     description="multi-spectral re-identification workbench")
    subs = parser.add_subparsers(dest="command", required=True)

    synth = subs.add_parser("synth", help="render a synthetic dataset split")
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--split", default="train")
    _add_config_args(synth)

    tr = subs.add_parser("train", help="train a model")
    tr.add_argument("--data", type=Path, required=True)
    tr.add_argument("--resume", type=Path, default=None)
    _add_runs_dir(tr)
    _add_config_args(tr)

    ev = subs.add_parser("eval", help="retrieval metrics for a checkpoint")
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--split", default="eval")
    _add_runs_dir(ev)
    _add_config_args(ev)

    rk = subs.add_parser("rank", help="dump nearest-neighbour lists")
    rk.add_argument("--data", type=Path, required=True)
    rk.add_argument("--checkpoint", type=Path, required=True)
    rk.add_argument("--split", default="eval")
    rk.add_argument("--top-k", type=int, default=10)
    _add_runs_dir(rk)
    _add_config_args(rk)

    gc = subs.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--entries", type=int, default=2,
                    help="spot-checked entries per model parameter")
    return parser


def _config_from_args(args):
    overrides = {}
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file not found: {args.config}")
        overrides.update(parse_config_text(args.config.read_text()))
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return build_run_config(overrides)


def _dispatch(args) -> int:
    if args.command == "synth":
        cfg = _config_from_args(args)
        records = data_mod.generate(cfg.data, args.out, split=args.split)
        print(f"wrote {len(records)} samples x 3 spectra under {args.out / args.split}")
        return 0

    if args.command == "train":
        cfg = _config_from_args(args)
        run_dir = train_mod.prepare_run_dir(args.runs_dir, args.name)
        summary = train_mod.run_training(cfg, args.data, run_dir, resume=args.resume)
        print(f"trained {summary['steps']} steps in {summary['seconds']:.1f}s; "
              f"checkpoint at {summary['checkpoint']}")
        return 0

    if args.command == "eval":
        cfg = _config_from_args(args)
        run_dir = train_mod.prepare_run_dir(args.runs_dir, args.name)
        train_mod.run_evaluation(cfg, args.data, run_dir, args.checkpoint, split=args.split)
        print(f"metrics written under {run_dir}")
        return 0

    if args.command == "rank":
        cfg = _config_from_args(args)
        run_dir = train_mod.prepare_run_dir(args.runs_dir, args.name)
        train_mod.run_rank_dump(cfg, args.data, run_dir, args.checkpoint,
                                split=args.split, top_k=args.top_k)
        return 0

    if args.command == "gradcheck":
        ok, results = train_mod.run_gradcheck(entries_per_param=args.entries)
        worst = max(results, key=lambda r: r.max_rel_error)
        print(f"checked {len(results)} items; worst {worst.name} "
              f"max_rel={worst.max_rel_error:.3e}")
        if not ok:
            failed = [r.name for r in results if not r.passed]
            raise NumericError(f"gradient check failed for: {', '.join(failed)}")
        print("gradient check passed")
        return 0

    raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except SpecReidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
