"""Command-line front end: ``confmix <subcommand> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .detector import load_checkpoint
from .synthetic import CLASS_NAMES, DatasetError, write_dataset
from .training import (OUTPUT_ROOT_ENV, SPLITS, SWEEP_AXES, ConfigError, RunConfig, _prepare_output,
                       checkpoint_or_pretrain, evaluate, load_data, run_adapt, run_oracle, run_pretrain,
                       run_sweep)

log = logging.getLogger("confmix")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items: Sequence[str]) -> dict:
    """``key=value`` pairs; values are read as JSON when they parse, else kept as strings."""
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        out[key.strip()] = _parse_value(value)
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    base.update(parse_overrides(args.set or []))
    if args.output_dir:
        base["output_dir"] = args.output_dir
    return RunConfig.from_dict(base)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else cfg.output_path() / "data"
    data = load_data(cfg)
    for split in SPLITS:
        write_dataset(out / split, data[split])
    _print_json({"data_dir": str(out), "counts": {s: len(data[s]) for s in SPLITS}})
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    _print_json(run_pretrain(cfg).summary)
    return 0


def cmd_oracle(cfg: RunConfig, args) -> int:
    _print_json(run_oracle(cfg).summary)
    return 0


def cmd_adapt(cfg: RunConfig, args) -> int:
    data = load_data(cfg)
    params = checkpoint_or_pretrain(cfg, args.checkpoint, data)
    _print_json(run_adapt(cfg, params, data).summary)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    params = load_checkpoint(args.checkpoint)
    data = load_data(cfg)
    if args.split not in data:
        raise ConfigError(f"split {args.split!r} not available; have {sorted(data)}")
    result, overlays = evaluate(params, data[args.split], cfg, with_overlays=True)
    out = _prepare_output(cfg)
    (out / f"ap_{args.split}.txt").write_text(result.table(CLASS_NAMES) + "\n")
    (out / f"overlays_{args.split}.json").write_text(json.dumps(overlays, indent=1) + "\n")
    print(result.table(CLASS_NAMES))
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    data = load_data(cfg)
    params = checkpoint_or_pretrain(cfg, args.checkpoint, data)
    values = [_parse_value(v) for v in args.values] if args.values else None
    rows = run_sweep(cfg, args.axis, values, params, data)
    print("rank\tvalue\ttarget_map")
    for r in rows:
        print(f"{r['rank']}\t{r['value']}\t{r['target_map']:.4f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "oracle": cmd_oracle,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confmix",
        description="Confidence-based region mixing for detector domain adaptation on synthetic scenes.",
        epilog=f"Relative output directories are placed under ${OUTPUT_ROOT_ENV} when it is set.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field (repeatable)")
    common.add_argument("--output-dir", help="shorthand for --set output_dir=...")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic benchmark splits to disk")
    p.add_argument("--out", help="target directory (default: <output_dir>/data)")
    sub.add_parser("pretrain", parents=[common], help="supervised training on the source split")
    sub.add_parser("oracle", parents=[common], help="supervised training on the labelled target split")
    p = sub.add_parser("adapt", parents=[common], help="confidence-mixing adaptation")
    p.add_argument("--checkpoint", help="start from this checkpoint instead of pretraining first")
    p = sub.add_parser("eval", parents=[common], help="per-class AP and TP/FP/FN overlays of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="target_test", choices=SPLITS)
    p = sub.add_parser("sweep", parents=[common], help="one adaptation run per value of an ablation axis")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", nargs="+", help="axis values (default: the built-in grid for the axis)")
    p.add_argument("--checkpoint", help="shared starting checkpoint (default: pretrain once)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DatasetError, FileNotFoundError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"confmix {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
