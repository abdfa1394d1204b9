"""Command-line entry points: train, sweep, mu-check, forecast, eval,
bench-latency, long-horizon. All commands take --config (JSON RunConfig),
--seed, and --out; outputs are CSV/JSON files in the output directory."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .harness import (
    RunConfig,
    SweepSpec,
    bench_latency,
    evaluate_files,
    forecast_to_csv,
    long_horizon_study,
    mu_check,
    sweep,
    train,
    _write_rows,
)
from .model import Model


def _load_config(args) -> RunConfig:
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    return config


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a JSON run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="patchcast",
                                     description="patched time-series forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="span-mask training run")
    _add_shared(p)
    p.add_argument("--log-every", type=int, default=200)

    p = sub.add_parser("sweep", help="grid/random hyperparameter sweep")
    _add_shared(p)
    p.add_argument("--grid", required=True,
                   help='JSON dict of config field -> candidate list, e.g. {"normuon_eta": [0.1, 0.65]}')
    p.add_argument("--objective", default="pinball", choices=["pinball", "crps", "mase"])
    p.add_argument("--trials", type=int, default=None)

    p = sub.add_parser("mu-check", help="learning-rate transfer across widths")
    _add_shared(p)
    p.add_argument("--widths", default="64,128,256")
    p.add_argument("--lr-grid", default=None,
                   help="comma-separated learning rates; default 0.65*4^k, k=-2..2")

    p = sub.add_parser("forecast", help="forecast a series CSV")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--series", required=True, help="input series CSV")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--mode", choices=["single_pass", "block"], default="single_pass")
    p.add_argument("--block-size", type=int, default=None)

    p = sub.add_parser("eval", help="score a forecast CSV against truth")
    _add_shared(p)
    p.add_argument("--forecast", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--insample", required=True)
    p.add_argument("--season", type=int, default=1)

    p = sub.add_parser("bench-latency", help="decode latency and forward-pass counts")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--horizons", default="32,256,1024")
    p.add_argument("--modes", default="single_pass,block")
    p.add_argument("--block-size", type=int, default=4)

    p = sub.add_parser("long-horizon", help="stability study far past the training context")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--horizons", default="2048,4096,8192")
    p.add_argument("--series", type=int, default=20)
    p.add_argument("--block-size", type=int, default=None)

    args = parser.parse_args(argv)

    if args.command == "train":
        config = _load_config(args)
        result = train(config, save=True, log_every=args.log_every)
        print(f"final loss {result.losses[-1]:.5f}; checkpoint at {result.checkpoint_dir}")
        return 0

    if args.command == "sweep":
        config = _load_config(args)
        spec = SweepSpec(grid=json.loads(args.grid), objective=args.objective,
                         trials=args.trials)
        out_csv = os.path.join(config.out_dir, "sweep.csv")
        rows = sweep(spec, config, out_csv=out_csv)
        best = min(rows, key=lambda r: r.get("objective", float("inf")))
        print(f"{len(rows)} trials -> {out_csv}; best trial {best['trial']} "
              f"objective {best['objective']:.5f}")
        return 0

    if args.command == "mu-check":
        config = _load_config(args)
        widths = [int(w) for w in args.widths.split(",")]
        if args.lr_grid:
            lr_grid = [float(x) for x in args.lr_grid.split(",")]
        else:
            lr_grid = [0.65 * 4.0**k for k in range(-2, 3)]
        out_csv = os.path.join(config.out_dir, "mu_check.csv")
        report = mu_check(widths, lr_grid, config, out_csv=out_csv, log_every=1)
        print(f"argmin lr per width: {report['argmin_lr']}")
        print(f"max argmin drift: {report['max_drift_steps']} grid steps")
        with open(os.path.join(config.out_dir, "mu_check.json"), "w") as f:
            json.dump(report, f, indent=1)
        return 0

    if args.command == "forecast":
        model = Model.load(args.checkpoint)
        out_dir = args.out or "."
        os.makedirs(out_dir, exist_ok=True)
        out_csv = os.path.join(out_dir, "forecast.csv")
        forecast_to_csv(model, args.series, args.horizon, out_csv,
                        mode=args.mode, block_size=args.block_size)
        print(f"forecast -> {out_csv}")
        return 0

    if args.command == "eval":
        out_dir = args.out or "."
        scores, _ = evaluate_files(args.forecast, args.truth, args.insample,
                                   season_length=args.season, out_dir=out_dir)
        for name, s in scores.items():
            shown = "absent: " + (s.reason or "") if s.value is None else f"{s.value:.6f}"
            print(f"{name:12s} {shown}")
        return 0

    if args.command == "bench-latency":
        model = Model.load(args.checkpoint)
        horizons = [int(h) for h in args.horizons.split(",")]
        modes = args.modes.split(",")
        rows = bench_latency(model, horizons, modes, block_size=args.block_size)
        out_dir = args.out or "."
        os.makedirs(out_dir, exist_ok=True)
        _write_rows(os.path.join(out_dir, "latency.csv"), rows)
        for r in rows:
            print(f"h={r['horizon']:<6d} {r['mode']:<12s} passes={r['forward_passes']:<4d} "
                  f"median {r['median_seconds'] * 1e3:.1f} ms")
        return 0

    if args.command == "long-horizon":
        model = Model.load(args.checkpoint)
        horizons = [int(h) for h in args.horizons.split(",")]
        out_dir = args.out or "long_horizon"
        rows = long_horizon_study(model, horizons=horizons, n_series=args.series,
                                  block_size=args.block_size, out_dir=out_dir)
        for h in horizons:
            rs = [r["pearson"] for r in rows if r["horizon"] == h and r["series"] != "control"]
            print(f"h={h:<6d} mean pearson {sum(rs) / len(rs):.4f} over {len(rs)} series")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
