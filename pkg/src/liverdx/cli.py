"""Command line entry point: ``liverdx {gen-data,train,eval,ablate,plot}``.

Errors exit with status 2 and one line on stderr: ``error code=<CODE> message=<text>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from liverdx.errors import ConfigError, LiverDxError
from liverdx.harness.ablation import run_ablation
from liverdx.harness.config import RunConfig, load_run_config
from liverdx.harness.evaluate import run_eval
from liverdx.harness.plots import plot_report
from liverdx.harness.train import read_train_log, run_train
from liverdx.metrics import EvalReport
from liverdx.phantom import PhantomConfig, build_dataset, delayed_only_pair_config

log = logging.getLogger("liverdx")


def _phantom_config(args):
    if args.preset == "delayed-pair":
        cfg = delayed_only_pair_config()
    elif args.config:
        data = yaml.safe_load(Path(args.config).read_text()) or {}
        cfg = PhantomConfig.from_dict(data)
    else:
        cfg = PhantomConfig()
    if args.grid_size is not None:
        cfg = replace(cfg, grid_size=args.grid_size)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.lesion_radius is not None:
        cfg = replace(cfg, lesion_radius_range=tuple(args.lesion_radius))
    return cfg.validate()


def cmd_gen_data(args):
    cfg = _phantom_config(args)
    index = build_dataset(cfg, args.n_cases, args.splits, args.out)
    print(json.dumps({k: len(v) for k, v in index.splits.items()}))


def _run_config(args):
    cfg = load_run_config(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    if getattr(args, "run_dir", None):
        overrides["run_dir"] = args.run_dir
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    return replace(cfg, **overrides).validate()


def cmd_train(args):
    cfg = _run_config(args)

    def progress(row):
        if row["step"] % args.log_every == 0:
            log.info("step %d total %.4f seg %.4f focal %.4f acl %.4f",
                     row["step"], row["total"], row["seg"], row["focal"], row["acl"])

    result = run_train(cfg, progress)
    print(str(result.checkpoint))


def cmd_eval(args):
    cfg = _run_config(args)
    result = run_eval(args.checkpoint, args.split, cfg, args.out)
    sys.stdout.write(result.report.to_table())
    if result.baseline is not None:
        sys.stdout.write(result.baseline.to_table())


def cmd_ablate(args):
    cfg = _run_config(args)
    grid = yaml.safe_load(Path(args.grid).read_text())
    table = run_ablation(cfg, grid, args.split, args.out)
    sys.stdout.write(table.to_text())


def cmd_plot(args):
    reports = [EvalReport.from_json(Path(p).read_text()) for p in args.reports]
    rows = read_train_log(args.train_log) if args.train_log else None
    for p in plot_report(reports, args.out, rows):
        print(str(p))


def build_parser():
    parser = argparse.ArgumentParser(prog="liverdx", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-cases", type=int, default=20)
    p.add_argument("--splits", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--config", help="phantom configuration YAML")
    p.add_argument("--preset", choices=("default", "delayed-pair"), default="default")
    p.add_argument("--grid-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lesion-radius", type=float, nargs=2, metavar=("LO", "HI"))
    p.set_defaults(func=cmd_gen_data)

    def run_args(p):
        p.add_argument("--config", help="run configuration YAML")
        p.add_argument("--dataset")
        p.add_argument("--run-dir")

    p = sub.add_parser("train", help="train a model")
    run_args(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    run_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a grid of ablation flags")
    run_args(p)
    p.add_argument("--grid", required=True, help="YAML list of flag dicts or dict of flag -> values")
    p.add_argument("--split")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="plot per-class AUC bars and an optional loss curve")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--train-log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def _fail(code, message):
    message = " ".join(str(message).split())
    print(f"error code={code} message={message}", file=sys.stderr)
    return 2


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        args.func(args)
    except LiverDxError as exc:
        return _fail(exc.code, exc)
    except FileNotFoundError as exc:
        return _fail("NOT_FOUND", exc)
    except (KeyError, ValueError, yaml.YAMLError) as exc:
        return _fail(ConfigError.code, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
