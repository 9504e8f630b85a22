"""Command-line entry point: ``prepare``, ``train``, ``evaluate``, ``sweep-beta``, ``ablate``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import experiments
from .config import ABLATION_VARIANTS, VARIANTS, build_plan, load_config, parse_override
from .data import ParseError

log = logging.getLogger("tdsgl")

# command-line flag -> config key; flags win over the config file
FLAG_KEYS = {
    "dataset": "dataset.path",
    "format": "dataset.format",
    "ratios": "split.ratios",
    "split_seed": "split.seed",
    "variant": "run.variant",
    "repeats": "run.repeats",
    "out": "run.out",
    "jobs": "run.jobs",
    "beta": "mask.beta",
    "beta_item": "mask.beta_item",
    "tau": "ssl.tau",
    "ssl_lambda": "ssl.lambda",
    "mu": "reg.mu",
    "layers": "model.layers",
    "dim": "model.dim",
    "aug": "aug.kind",
    "rho": "aug.rho",
    "fe": "fe.kind",
    "lr": "train.lr",
    "batch": "train.batch",
    "epochs": "train.epochs",
    "patience": "train.patience",
    "seed": "train.seed",
    "eval_every": "eval.every",
}


def _ratios(text: str) -> list[float]:
    parts = [float(x) for x in text.replace("/", ",").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios look like 0.8,0.1,0.1")
    return parts


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with flat section.key settings")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--dataset", help="dataset path, or name under $TDSGL_DATA")
    p.add_argument("--format", choices=["auto", "adj", "edges"])
    p.add_argument("--ratios", type=_ratios, help="train,validation,test (default 0.8,0.1,0.1)")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--prepared", help="prepared dataset directory (default: derived from --dataset)")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--beta", type=int)
    p.add_argument("--beta-item", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="ssl_lambda", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--aug", choices=["ed", "nd", "rw"])
    p.add_argument("--rho", type=float)
    p.add_argument("--fe", choices=["linear", "nl", "nl+w"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--jobs", type=int, help="parallel processes for repeats/sweeps")
    p.add_argument("--out", help="root directory for run directories (default runs/)")
    p.add_argument("--full-contrast", action="store_true", default=None)
    p.add_argument("--no-self-loop", action="store_true", default=None)
    p.add_argument("--exclude-positive", action="store_true", default=None,
                   help="literal denominator: drop the positive pair when its mask entry is 0")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdsgl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    # lets -v also follow the subcommand without resetting the count
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="parse, split and cache a dataset")
    _add_data_args(p)
    p.add_argument("--beta", type=int, action="append", help="threshold(s) to cache masks for")

    p = sub.add_parser("train", parents=[common], help="train one variant (optionally repeated over seeds)")
    _add_data_args(p)
    _add_model_args(p)

    p = sub.add_parser("evaluate", parents=[common], help="recompute test metrics from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--check", action="store_true", help="fail unless metrics equal final_metrics.json")

    p = sub.add_parser("sweep-beta", parents=[common], help="one run set per threshold value")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--betas", type=lambda s: [int(x) for x in s.split(",")],
                   help="comma-separated thresholds, e.g. 6,7,8,9,10")

    p = sub.add_parser("ablate", parents=[common], help="run the ablation variants under shared seeds")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--variants", type=lambda s: s.split(","), default=list(ABLATION_VARIANTS))
    return parser


def _settings(args) -> dict:
    settings = load_config(args.config) if getattr(args, "config", None) else {}
    for text in getattr(args, "set", []):
        key, value = parse_override(text)
        settings[key] = value
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None and not (attr == "beta" and isinstance(value, list)):
            settings[key] = value
    if getattr(args, "full_contrast", None):
        settings["ssl.full_contrast"] = True
    if getattr(args, "no_self_loop", None):
        settings["model.self_loop"] = False
    if getattr(args, "exclude_positive", None):
        settings["ssl.include_positive_in_denominator"] = False
    return settings


def _prepared_dir(args, plan, betas) -> str:
    if getattr(args, "prepared", None):
        return args.prepared
    if not plan.dataset:
        raise SystemExit("error: give --dataset (or dataset.path in --config) or --prepared")
    path = experiments.resolve_dataset(plan.dataset)
    manifest, _ = experiments.prepare(path, None, plan.ratios, plan.split_seed, betas, plan.fmt)
    return manifest["path"]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return _dispatch(args)
    except (FileNotFoundError, ParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "evaluate":
        metrics = experiments.evaluate_run(args.run_dir)
        print(json.dumps(metrics, sort_keys=True))
        if args.check:
            with open(os.path.join(args.run_dir, "final_metrics.json"), encoding="utf-8") as fh:
                recorded = json.load(fh)
            if any(recorded.get(k) != v for k, v in metrics.items()):
                print("error: recomputed metrics differ from final_metrics.json", file=sys.stderr)
                return 1
        return 0

    plan = build_plan(_settings(args))
    hyper = plan.hyper

    if args.command == "prepare":
        if not plan.dataset:
            raise SystemExit("error: prepare needs --dataset")
        path = experiments.resolve_dataset(plan.dataset)
        manifest, hit = experiments.prepare(
            path, args.prepared, plan.ratios, plan.split_seed, args.beta or [hyper.beta], plan.fmt
        )
        manifest["cache_hit"] = hit
        print(json.dumps(manifest, indent=2, sort_keys=True))
        return 0

    if args.command == "train":
        prepared = _prepared_dir(args, plan, [hyper.beta])
        records, summary = experiments.run_repeats(
            prepared, hyper, plan.variant, plan.repeats, plan.out, plan.jobs
        )
        print(json.dumps(summary if plan.repeats > 1 else records[0], indent=2, sort_keys=True))
        return 0

    if args.command == "sweep-beta":
        betas = args.betas or plan.sweep
        if not betas:
            raise SystemExit("error: sweep-beta needs --betas")
        prepared = _prepared_dir(args, plan, betas)
        rows = experiments.sweep_beta(prepared, hyper, betas, plan.variant, plan.repeats, plan.out, plan.jobs)
        print(json.dumps({b: s for b, s, _ in rows}, indent=2, sort_keys=True))
        return 0

    if args.command == "ablate":
        prepared = _prepared_dir(args, plan, [hyper.beta])
        rows = experiments.ablate(prepared, hyper, args.variants, plan.repeats, plan.out, plan.jobs)
        print(json.dumps({v: s for v, s, _ in rows}, indent=2, sort_keys=True))
        return 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
