"""Command-line driver: ``gen-data``, ``train``, ``eval``, ``sweep`` and ``ablate``.

Exit codes: 0 success, 2 configuration error, 3 I/O or parse error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint
from .config import ExperimentConfig, load_config
from .errors import AlignmentError, ConfigError, DimensionError, NumericalError, ParseError
from .evaluator import read_detections, evaluate
from .experiments import (ABLATION_HEADER, EVAL_HEADER, SWEEP_AXES, ablation_means, eval_samples, final_val,
                          generate_data, load_data, run_ablation, run_sweep, run_train, write_csv)
from .trainer import evaluate_weights

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_GRIDS = {"threshold": "0.3,0.5,0.7,0.9", "ratio": "1:1,1:2,1:3,1:4"}

log = logging.getLogger("semiseg")


def _config(args, seed_key: str | None = None) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}", key=item)
        overrides[key.strip()] = value.strip()
    if seed_key and getattr(args, "seed", None) is not None:
        overrides[seed_key] = str(args.seed)
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args, "data.seed")
    counts = generate_data(cfg, args.out)
    print(f"wrote {counts['train']} training images ({counts['labeled']} labeled, {counts['unlabeled']} unlabeled, "
          f"{counts['instances']} instances) and {counts['val']} validation images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, "train.seed")
    samples, split, val = load_data(args.data, cfg.scene_spec().vocab)
    result = run_train(cfg, samples, split, val, args.out)
    last = final_val(result.metrics)
    if last is not None:
        print(f"final teacher: AP {last['AP']:.2f}  AP50 {last['AP50']:.2f}  AP75 {last['AP75']:.2f}")
    print(f"checkpoints and metrics.csv written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint and not args.detections:
        raise ConfigError("eval needs --checkpoint or --detections", key="eval.source")
    samples = eval_samples(args.data)
    score_floor = _config(args)["eval.score_floor"]
    if args.detections:
        source = Path(args.detections)
        report = evaluate(read_detections(source), samples)
    else:
        source = Path(args.checkpoint)
        weights = checkpoint.load_weights(source)
        report = evaluate_weights(weights, samples, score_floor)
    print(report)
    out = Path(args.out) if args.out else source.parent
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eval.csv", EVAL_HEADER, [{"source": source.name, **report.as_row()}])
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args, "train.seed")
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; expected one of {', '.join(SWEEP_AXES)}",
                          key="sweep.axis")
    text = args.values if args.values is not None else SWEEP_GRIDS[args.axis]
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty", key="sweep.values")
    samples, split, val = load_data(args.data, cfg.scene_spec().vocab)
    rows = run_sweep(cfg, samples, split, val, args.axis, values, args.out)
    for r in rows:
        print(f"{r['axis']}={r['value']}: AP {r['AP']:.2f}  AP50 {r['AP50']:.2f}  AP75 {r['AP75']:.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}", key="ablation.seeds") from None
    samples, split, val = load_data(args.data, cfg.scene_spec().vocab)
    rows = run_ablation(cfg, samples, split, val, seeds, args.out)
    means = ablation_means(rows)
    for (sem, two), ap in sorted(means.items()):
        print(f"semantic_branch={'on' if sem else 'off'} two_stage={'on' if two else 'off'}: mean AP {ap:.2f}")
    print(f"{Path(args.out) / 'ablation.csv'} ({', '.join(ABLATION_HEADER)})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semiseg", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="config file of 'section.key = value' lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed:
            p.add_argument("--seed", type=int, help="override the seed")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="two-stage training run")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a detection file")
    common(p, seed=False)
    p.add_argument("--checkpoint")
    p.add_argument("--detections")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for eval.csv (default: next to the input)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="stage-2 sweep over threshold or ratio")
    common(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", help="comma-separated, e.g. 0.3,0.5 or 1:1,1:2 (default: the axis grid)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="four-way semantic-branch / two-stage ablation over seeds")
    common(p, seed=False)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, AlignmentError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
