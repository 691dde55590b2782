"""Command line interface.

Subcommands: ``run`` executes a config, ``report`` re-emits reports from
stored checkpoints, ``count-params`` prints the closed-form plugin
parameter ledger, ``drift`` compares two extractor checkpoints on a
probe set. Exit codes: 0 success, 1 config error, 2 data error,
3 training failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import apply_overrides, load_config
from .convlora import plugin_param_count
from .datasets import ingest_dataset
from .errors import ConfigError, DataError, ProtocolError, TrainingError
from .metrics import drift_all_taps, measure_drift
from .runner import emit_report, rebuild_report, run_experiment
from .seeding import derive_seed, numpy_rng
from .substrate import FeatureExtractor
from .tensorio import load_module


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.set:
        apply_overrides(config, _parse_overrides(args.set))
        config.validate()
    result = run_experiment(config, output_dir=args.output)
    root = result["root"]
    print(f"wrote {root}/config.txt")
    print(f"wrote {root}/summary.txt")
    for seed in config.seeds:
        print(f"wrote {root}/seed_{seed}/report.csv")
    print(f"mean a_last = {result['mean_a_last']:.2f}")
    print(f"mean a_bar  = {result['mean_a_bar']:.2f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    report, header = rebuild_report(args.run_dir)
    paths = emit_report(report, args.out, header_info=header)
    for path in paths:
        print(f"wrote {path}")
    return 0


def cmd_count_params(args: argparse.Namespace) -> int:
    per_plugin = plugin_param_count(args.c_in, args.c_out, args.kernel, args.rank)
    per_task = per_plugin * args.k_plugins
    total = per_task * args.tasks
    print(f"per_plugin = {per_plugin}")
    print(f"per_task   = {per_task}")
    print(f"total      = {total}")
    return 0


def _load_extractor(config, stage_dir: Path, in_channels: int) -> FeatureExtractor:
    extractor = FeatureExtractor(config.backbone_spec(in_channels))
    load_module(Path(stage_dir) / "extractor.ten", extractor)
    return extractor


def cmd_drift(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    dataset = ingest_dataset(
        config.dataset_format, config.dataset_path or None, config.class_count,
        config.synthetic_spec() if config.dataset_format == "synthetic" else None,
    )
    rng = numpy_rng(derive_seed(config.order_seed, "drift-cli"))
    take = min(args.probe_size, len(dataset.test_images))
    picks = rng.choice(len(dataset.test_images), size=take, replace=False)
    probe = dataset.test_images[picks]
    in_channels = dataset.image_shape[2]
    before = _load_extractor(config, args.before, in_channels)
    after = _load_extractor(config, args.after, in_channels)
    if args.layer:
        reports = [measure_drift(before, after, args.layer, probe)]
    else:
        reports = drift_all_taps(before, after, probe)
    for rep in reports:
        print(f"{rep.layer}: mean_l2 = {rep.mean_l2:.6g}, max_l2 = {rep.max_l2:.6g} "
              f"(probe {rep.probe_size})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlcbench",
        description="Incremental-learning benchmark with per-task ConvLoRA plugins",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to a key = value config file")
    p_run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
    p_run.add_argument("--output", default=None, help="output directory override")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="re-emit reports from checkpoints")
    p_rep.add_argument("run_dir", help="a per-seed run directory")
    p_rep.add_argument("--out", required=True, help="directory for re-emitted files")
    p_rep.set_defaults(func=cmd_report)

    p_cnt = sub.add_parser("count-params", help="closed-form plugin parameter ledger")
    p_cnt.add_argument("--c-in", type=int, required=True, dest="c_in")
    p_cnt.add_argument("--c-out", type=int, required=True, dest="c_out")
    p_cnt.add_argument("--kernel", type=int, default=3)
    p_cnt.add_argument("--rank", type=int, required=True)
    p_cnt.add_argument("--tasks", type=int, required=True)
    p_cnt.add_argument("--k-plugins", type=int, default=1, dest="k_plugins")
    p_cnt.set_defaults(func=cmd_count_params)

    p_drift = sub.add_parser("drift", help="compare two extractor checkpoints")
    p_drift.add_argument("--before", required=True, help="stage checkpoint directory")
    p_drift.add_argument("--after", required=True, help="stage checkpoint directory")
    p_drift.add_argument("--config", required=True, help="config used for the run")
    p_drift.add_argument("--layer", default=None, help="single tap name (default: all)")
    p_drift.add_argument("--probe-size", type=int, default=256, dest="probe_size")
    p_drift.set_defaults(func=cmd_drift)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ProtocolError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
