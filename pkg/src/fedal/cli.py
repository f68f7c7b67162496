"""Command-line entry point: train, eval, sweep, ablate.

Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from fedal.config import ABLATIONS, RunConfig, load_config
from fedal.errors import ConfigError
from fedal.evaluation import AXES, evaluate_config, reconstruct_eval, scaling_sweep, write_reports
from fedal.orchestrator import make_holdout, run_training
from fedal.params import load_checkpoint

log = logging.getLogger("fedal")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _progress(rep) -> None:
    losses = [v[-1] for v in rep.losses.values() if v]
    mean = sum(losses) / len(losses) if losses else float("nan")
    log.info("round %d: clients %s, mean loss %.4f, |s| %.4g (%.0f ms)",
             rep.round, rep.participants, mean, rep.s_norm, rep.wall_ms)


def cmd_train(args) -> int:
    cfg = _config(args)
    res = run_training(cfg, out=args.out, workers=args.workers, progress=_progress)
    mse = evaluate_config(cfg, res.theta_g)
    with (Path(args.out) / "eval.csv").open("w", newline="") as fh:
        csv.writer(fh).writerows([["round", "mask_ratio", "mse"], [cfg.rounds, cfg.mask_ratio, repr(mse)]])
    print(f"trained {cfg.rounds} rounds; held-out mse@0.75 = {mse:.6f}; run dir {args.out}")
    return 0


def cmd_eval(args) -> int:
    try:
        theta, meta = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc}") from None
    if "config" not in meta:
        raise ConfigError("checkpoint carries no run config; cannot rebuild the held-out set")
    cfg = RunConfig.from_dict(meta["config"])
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if not 0.0 <= args.mask_ratio <= 1.0:
        raise ConfigError(f"mask ratio {args.mask_ratio} outside [0, 1]")
    rep = reconstruct_eval(theta, make_holdout(cfg), args.mask_ratio, cfg.seed, cfg.backbone,
                           model_id=Path(args.checkpoint).name)
    write_reports([rep], Path(args.out) / "eval.csv")
    print(f"mse {rep.mse:.6f} mae {rep.mae:.6f} over {rep.n_sequences} sequences")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse grid {args.grid!r}") from None
    if not grid:
        raise ConfigError("empty grid")
    rows = scaling_sweep(args.axis, grid, cfg, out=Path(args.out) / f"sweep_{args.axis}.csv")
    for axis, v, mse in rows:
        print(f"{axis}={v:g}: mse@0.75 = {mse:.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = []
    for name, c in (("base", cfg), (f"toggle:{args.toggle}", cfg.toggled(args.toggle))):
        res = run_training(c, out=Path(args.out) / name.replace(":", "_"))
        rows.append((name, evaluate_config(c, res.theta_g)))
    with (Path(args.out) / "ablate.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mse@0.75"])
        for name, mse in rows:
            w.writerow([name, repr(mse)])
            print(f"{name}: mse@0.75 = {mse:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", default="runs/out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("train", help="run federated pretraining")
    sp.add_argument("--config", required=True)
    sp.add_argument("--workers", type=int, default=None, help="parallel client workers")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="held-out reconstruction metrics for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mask-ratio", type=float, required=True)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="scaling sweep along one axis")
    sp.add_argument("--axis", choices=AXES, required=True)
    sp.add_argument("--grid", required=True, help="comma-separated values")
    sp.add_argument("--config", default=None)
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ablate", help="compare a config against one toggled mechanism")
    sp.add_argument("--config", required=True)
    sp.add_argument("--toggle", choices=ABLATIONS, required=True)
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
