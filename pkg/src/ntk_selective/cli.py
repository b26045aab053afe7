"""Command line entry point: ``ntkss <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .environment import generate
from .harness import (
    ExperimentConfig,
    build_environment,
    run_base,
    run_modsel,
    run_ntk,
    run_ntk_stream,
    summarize,
    verify_output_dir,
)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags below override it")
    p.add_argument("--seed", type=int)
    p.add_argument("-T", "--T", dest="T", type=int)
    p.add_argument("-m", "--m", dest="width", type=int, help="network width")
    p.add_argument("-n", "--n", dest="depth", type=int, help="network depth")
    p.add_argument("--delta", type=float)
    p.add_argument("--gamma", dest="gamma_exp", type=float, help="exploration exponent of the meta-learner")
    p.add_argument("--alpha", type=float, help="margin exponent (use inf for hard margin)")
    p.add_argument("--eps0", type=float, help="hard-margin epsilon")
    p.add_argument("--env", choices=["linear", "margin_controlled", "ntk_rkhs"])
    p.add_argument("--d", type=int, help="context dimension")
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--trace", choices=["full", "summary"])
    p.add_argument("--output-dir", dest="output_dir")


def _env_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env", choices=["linear", "margin_controlled", "ntk_rkhs"], default="linear")
    p.add_argument("--d", type=int, default=5)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--eps0", type=float, default=0.1)
    p.add_argument("--target-S", dest="target_S", type=float, default=2.0)
    p.add_argument("--n-points", dest="n_points", type=int, default=64)
    p.add_argument("-T", "--T", dest="T", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-n", "--n", dest="depth", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntkss", description="NTK selective sampling experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ntk", help="NTK statistics (lambda0, L_H, S) for a point set")
    _env_flags(p)
    p.add_argument("--points", help="CSV of unit-norm rows (header x0..; optional h column)")
    p.add_argument("--with-H", dest="with_H", action="store_true", help="include the NTK matrix itself")
    p.add_argument("--output-dir", dest="output_dir")

    p = sub.add_parser("datagen", help="write a synthetic stream as CSV")
    _env_flags(p)
    p.add_argument("--output-dir", dest="output_dir", required=True)

    p = sub.add_parser("run-base", help="run a single selective sampler")
    _add_run_flags(p)
    p.add_argument("--S", help="learner S, or 'auto'")
    p.add_argument("--variant", choices=["frozen", "nonfrozen"])
    p.add_argument("--always-query", dest="always_query", action="store_true", default=None)

    p = sub.add_parser("run-modsel", help="run the model-selection meta-learner")
    _add_run_flags(p)
    p.add_argument("--variant", choices=["frozen", "nonfrozen"])

    p = sub.add_parser("verify-trace", help="recompute summaries from the traces in a run directory")
    p.add_argument("output_dir")

    p = sub.add_parser("summarize", help="aggregate summary JSON files")
    p.add_argument("paths", nargs="+")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    for key in ("seed", "T", "width", "depth", "delta", "gamma_exp", "trials", "workers",
                "trace", "output_dir"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    env = dict(data.get("env", {}))
    for key, dest in (("alpha", "alpha"), ("eps0", "hard_margin_eps"), ("env", "kind"), ("d", "d")):
        val = getattr(args, key, None)
        if val is not None:
            env[dest] = val
    data["env"] = env
    lrn = dict(data.get("learner", {}))
    if getattr(args, "S", None) is not None:
        lrn["S"] = args.S if args.S == "auto" else float(args.S)
    for key in ("variant", "always_query"):
        val = getattr(args, key, None)
        if val is not None:
            lrn[key] = val
    data["learner"] = lrn
    return ExperimentConfig.from_dict(data)


def _env_from_args(args):
    cfg = ExperimentConfig(env={"kind": args.env, "d": args.d, "alpha": args.alpha,
                                "hard_margin_eps": args.eps0, "target_S": args.target_S,
                                "n_points": args.n_points}, depth=args.depth)
    model, noise = build_environment(cfg.env, args.depth)
    return cfg, model, noise


def _emit(obj, output_dir, name) -> None:
    text = json.dumps(obj, indent=2, default=float)
    print(text)
    if output_dir:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


def _read_points(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = [i for i, h in enumerate(header) if h.startswith("x")]
    X = np.array([[float(r[i]) for i in cols] for r in body])
    h = None
    if "h" in header:
        k = header.index("h")
        h = np.array([float(r[k]) for r in body])
    return X, h


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "ntk":
        if args.points:
            X, h = _read_points(args.points)
            result = run_ntk(X, args.depth, h, include_H=args.with_H)
        else:
            _, model, noise = _env_from_args(args)
            result = run_ntk_stream(generate(model, noise, args.T, args.seed), args.depth)
        _emit(result, args.output_dir, "ntk.json")
        return 0
    if args.command == "datagen":
        cfg, model, noise = _env_from_args(args)
        stream = generate(model, noise, args.T, args.seed)
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        stream.to_csv(out / "stream.csv")
        meta = {"env": cfg.to_dict()["env"], "T": args.T, "seed": args.seed, "version": cfg.version}
        (out / "environment.json").write_text(json.dumps(meta, indent=2) + "\n")
        print(f"wrote {len(stream)} records to {out / 'stream.csv'}")
        return 0
    if args.command in ("run-base", "run-modsel"):
        cfg = _config_from_args(args)
        report = (run_base if args.command == "run-base" else run_modsel)(cfg)
        print(json.dumps({"config": report.config, "aggregate": report.aggregate(),
                          "wall_clock": report.wall_clock}, indent=2, default=float))
        return 0
    if args.command == "verify-trace":
        problems = verify_output_dir(args.output_dir)
        bad = {k: v for k, v in problems.items() if v}
        for path, issues in sorted(problems.items()):
            print(f"{'FAIL' if issues else 'ok  '} {path}")
            for msg in issues:
                print(f"     {msg}")
        if not problems:
            print("no summaries found")
            return 1
        return 1 if bad else 0
    if args.command == "summarize":
        print(json.dumps(summarize(args.paths), indent=2))
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
