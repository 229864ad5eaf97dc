"""Command line: datagen, train, eval, ablate, gradcheck, inspect.

Exit status: 0 success, 1 run failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

from .. import numcore as nc
from .. import synthgen
from ..numcore import ConfigError, NonFiniteError
from . import runner
from .config import config_hash, load_config, parse_value
from .data import load_split, scene_seeds
from .gradcheck import gradcheck_all

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, metavar="N", help="run a single seed")
    common.add_argument("--no-lidar", action="store_true",
                        help="feed all-zero LiDAR inputs (missing-LiDAR mode)")
    common.add_argument("--mode", metavar="M", help="fusion mode, e.g. progressive")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")

    p = _Parser(prog="quatfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("datagen", parents=[common], help="write the seeded scenes to disk")
    sub.add_parser("train", parents=[common], help="train and checkpoint one model per seed")
    ev = sub.add_parser("eval", parents=[common], help="score checkpoints on held-out scenes")
    ev.add_argument("--checkpoint", metavar="DIR", help="checkpoint directory")
    ab = sub.add_parser("ablate", parents=[common], help="run one ablation axis")
    ab.add_argument("--axis", required=True, choices=runner.AXES)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    ins = sub.add_parser("inspect", help="summary statistics of tensor snapshots")
    ins.add_argument("path", help="a .qft snapshot or a checkpoint directory")
    return p


def resolve_config(args, command: str):
    overrides = {"mode": command}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = parse_value(key.strip(), val)
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.no_lidar:
        overrides["lidar_present"] = False
    if args.mode is not None:
        overrides["fusion_mode"] = args.mode
    if args.out is not None:
        overrides["out"] = args.out
    return load_config(args.config, overrides)


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_datagen(cfg) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    for split, n in (("train", cfg.train_scenes), ("eval", cfg.eval_scenes)):
        for s in scene_seeds(cfg.data_seed, split, n):
            scene = synthgen.generate_scene(synthgen.SceneSpec(seed=s))
            synthgen.save_scene(os.path.join(cfg.out, split, f"{s:08d}"), scene)
    runner.write_manifest(cfg.out, cfg, {"train_scenes": cfg.train_scenes,
                                         "eval_scenes": cfg.eval_scenes})
    _say(f"wrote {cfg.train_scenes} train and {cfg.eval_scenes} eval scenes under {cfg.out}")
    return EXIT_OK


def _ckpt_dir(cfg, seed: int) -> str:
    return os.path.join(cfg.out, "checkpoints", f"{cfg.fusion_mode}-s{seed}")


def cmd_train(cfg) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    status = EXIT_OK
    rows = []
    for seed in cfg.seeds:
        run = runner.run_single(cfg, cfg.fusion_mode, seed)
        rows += runner.records(run)
        if run.train.failure is not None:
            _say(f"seed {seed}: FAILED: {run.train.failure}")
            status = EXIT_FAIL
            continue
        runner.save_checkpoint(_ckpt_dir(cfg, seed), run.model, cfg, seed)
        _say(f"seed {seed}: loss {rows[-1].loss:.4f} toy_ap {rows[-1].toy_ap:.4f}")
    runner.write_csv(os.path.join(cfg.out, "metrics.csv"), rows, append=True)
    runner.write_manifest(cfg.out, cfg, {"command": "train"})
    return status


def cmd_eval(cfg, checkpoint: str | None) -> int:
    dirs = [checkpoint] if checkpoint else sorted(
        glob.glob(os.path.join(cfg.out, "checkpoints", "*")))
    if not dirs:
        raise ConfigError(f"no checkpoints found under {cfg.out}")
    rows = []
    for d in dirs:
        model, saved, seed = runner.load_checkpoint(d)
        # data and metric settings come from the invocation, weights from disk
        ecfg = saved.replace(lidar_present=cfg.lidar_present, eval_scenes=cfg.eval_scenes,
                             data_seed=cfg.data_seed, match_radius=cfg.match_radius,
                             peak_threshold=cfg.peak_threshold)
        held = load_split(ecfg, "eval")
        ap, finite = runner.evaluate(model, held, ecfg)
        if not finite:
            _say(f"{d}: non-finite outputs")
            return EXIT_FAIL
        h = config_hash(ecfg)
        rows.append(runner.MetricsRecord(f"{h[:12]}-eval-s{seed}", h, saved.fusion_mode, seed,
                                         saved.steps, float("nan"), ap, ecfg.lidar_present, 0.0))
        _say(f"{d}: toy_ap {ap:.4f} (lidar {'on' if ecfg.lidar_present else 'off'})")
    os.makedirs(cfg.out, exist_ok=True)
    runner.write_csv(os.path.join(cfg.out, "metrics.csv"), rows, append=True)
    return EXIT_OK


def cmd_ablate(cfg, axis: str) -> int:
    rep = runner.run_ablation_matrix(cfg, axis, cfg.out)
    for r in rep.rows:
        _say(f"{r.variant:24s} seed {r.seed:3d} lidar {'on ' if r.lidar_present else 'off'} "
             f"loss {r.loss:.4f} toy_ap {r.toy_ap:.4f}")
    _say(f"wrote {rep.csv_path}")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    rep = gradcheck_all(cfg.seeds[0])
    for line in rep.lines():
        _say(line)
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, "gradcheck.txt"), "w") as fh:
            fh.write("\n".join(rep.lines()) + "\n")
    if not rep.passed:
        _say("failing: " + ", ".join(r.name for r in rep.failures))
        return EXIT_FAIL
    return EXIT_OK


def tensor_stats(t: nc.Tensor) -> str:
    d = t.data
    return (f"shape={list(d.shape)} min={d.min():.6g} max={d.max():.6g} mean={d.mean():.6g} "
            f"std={d.std():.6g} l2={np.linalg.norm(d):.6g}")


def cmd_inspect(path: str) -> int:
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "**", "*.qft"), recursive=True))
        if not files:
            raise ConfigError(f"no .qft snapshots under {path}")
    elif os.path.isfile(path):
        files = [path]
    else:
        raise ConfigError(f"no such file or directory: {path}")
    for f in files:
        _say(f"{os.path.relpath(f, path) if os.path.isdir(path) else f}: "
             f"{tensor_stats(nc.load_tensor(f))}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "inspect":
            return cmd_inspect(args.path)
        cfg = resolve_config(args, args.command)
        if args.command == "datagen":
            return cmd_datagen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.axis)
        return cmd_gradcheck(cfg)
    except (ConfigError, OSError) as exc:
        print(f"quatfuse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, ValueError) as exc:
        print(f"quatfuse: run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
