"""Experiment command line: train / evaluate / ablate / overlap-sweep /
grid / make-synthetic.

Every run writes a manifest (resolved config, seed, version) plus its
delimited outputs and a rendered figure under the output directory. The
CIDER_OUT environment variable overrides the output root.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import subprocess
import sys
from pathlib import Path

from . import __version__
from .config import (
    ExperimentConfig,
    apply_overrides,
    coerce_value,
    config_to_dict,
    load_config,
    resolve_dataset,
    save_config,
)
from .data import save_dataset
from .errors import CiderError, ConfigError
from .evaluation import (
    aggregate_runs,
    evaluate,
    build_pools,
    overlap_ratio_harness,
    write_report,
    write_rows_csv,
)
from .plots import plot_loss_curves, plot_metric_bars, plot_metric_lines
from .synthetic import SyntheticSpec, write_domain_csvs
from .training import load_checkpoint, save_checkpoint, train

VARIANT_SEQUENCE = ("A", "B", "C", "D", "E", "full")


def version_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        suffix = described.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        suffix = ""
    return f"cider {__version__}" + (f" ({suffix})" if suffix else "")


def _write_manifest(out_dir: Path, command: str, argv, config: ExperimentConfig, extra=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config_to_dict(config),
        "seed": config.train.seed,
        "version": version_string(),
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _parse_params(pairs, allow_lists: bool):
    overrides = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--param expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        values = [coerce_value(v) for v in raw.split(",")]
        if allow_lists:
            overrides[key.strip()] = values
        else:
            if len(values) != 1:
                raise ConfigError(f"parameter {key!r} takes a single value here")
            overrides[key.strip()] = values[0]
    return overrides


def _load_base_config(args, include_params: bool = True) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if include_params:
        overrides = _parse_params(getattr(args, "param", None), allow_lists=False)
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        overrides["train.variant"] = args.variant
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _out_dir(args, config: ExperimentConfig) -> Path:
    root = os.environ.get("CIDER_OUT") or args.out or config.output_dir
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _metric_rows(metrics: dict, **context) -> list[dict]:
    rows = []
    for domain in sorted(metrics):
        rows.append({**context, "domain": domain, **metrics[domain]})
    return rows


def _train_once(config: ExperimentConfig, dataset):
    trained, log = train(dataset, config)
    pools = build_pools(dataset, config.train.seed, config.evaluation.pool_size)
    metrics, _ = evaluate(trained, dataset, pools, "test")
    return trained, log, metrics


def cmd_train(args) -> int:
    config = _load_base_config(args)
    out = _out_dir(args, config)
    dataset = resolve_dataset(config)
    trained, log = train(dataset, config)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained, out / "checkpoint")
    save_dataset(dataset, out / "dataset.json")
    save_config(config, out / "config.yaml")
    log.write_csv(out / "loss_log.csv")
    if log.centroid_snapshots:
        log.write_centroid_log(out / "centroid_log.jsonl")
    plot_loss_curves(log.rows, out / "loss_curves.png")
    _write_manifest(out, "train", args.argv, config,
                    extra={"dataset_fingerprint": dataset.fingerprint()})
    print(f"trained {config.train.epochs} epochs; checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt_dir = Path(args.checkpoint)
    trained = load_checkpoint(ckpt_dir)
    config = trained.config
    if args.config:
        config = load_config(args.config)
    out = _out_dir(args, config)
    cache = ckpt_dir.parent / "dataset.json"
    if cache.exists():
        from .data import load_dataset

        dataset = load_dataset(cache)
    else:
        dataset = resolve_dataset(config)
    pools = build_pools(dataset, config.train.seed, config.evaluation.pool_size)
    metrics, _ = evaluate(trained, dataset, pools, args.mode)
    aggregate = aggregate_runs([metrics])
    write_report(aggregate, out, stem="report")
    rows = []
    for domain, values in metrics.items():
        for metric, value in values.items():
            rows.append({"domain": domain, "metric": metric, "value": value})
    plot_metric_bars(rows, "value", "metric", out / "report.png")
    _write_manifest(out, "evaluate", args.argv, config)
    print(json.dumps(aggregate, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    config = _load_base_config(args)
    out = _out_dir(args, config)
    dataset = resolve_dataset(config)
    rows = []
    for variant in VARIANT_SEQUENCE:
        variant_config = apply_overrides(config, {"train.variant": variant})
        _, _, metrics = _train_once(variant_config, dataset)
        rows.extend(_metric_rows(metrics, variant=variant))
        print(f"variant {variant}: " + ", ".join(
            f"{d} MRR={metrics[d]['MRR']:.4f}" for d in sorted(metrics)))
    write_rows_csv(rows, out / "ablation.csv")
    plot_metric_bars(rows, "MRR", "variant", out / "ablation.png")
    _write_manifest(out, "ablate", args.argv, config)
    return 0


def cmd_overlap_sweep(args) -> int:
    config = _load_base_config(args)
    out = _out_dir(args, config)
    dataset = resolve_dataset(config)
    ratios = args.ratio or [0, 25, 50, 75, 100]
    rows = overlap_ratio_harness(dataset, ratios, config)
    write_rows_csv(rows, out / "overlap_sweep.csv")
    plot_metric_lines(rows, "MRR", "ratio", out / "overlap_sweep.png")
    _write_manifest(out, "overlap-sweep", args.argv, config, extra={"ratios": list(ratios)})
    for row in rows:
        print(f"ratio {row['ratio']:>3} domain {row['domain']}: MRR={row['MRR']:.4f}")
    return 0


def cmd_grid(args) -> int:
    config = _load_base_config(args, include_params=False)
    out = _out_dir(args, config)
    grid = _parse_params(args.param, allow_lists=True)
    if not grid:
        raise ConfigError("grid needs at least one --param key=v1,v2,...")
    dataset = resolve_dataset(config)
    keys = sorted(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, combo))
        point_config = apply_overrides(config, point)
        _, _, metrics = _train_once(point_config, dataset)
        rows.extend(_metric_rows(metrics, **point))
        print("grid point " + ", ".join(f"{k}={v}" for k, v in point.items()) + " done")
    write_rows_csv(rows, out / "grid.csv")
    if len(keys) == 1:
        plot_metric_lines(rows, "MRR", keys[0], out / "grid.png")
    _write_manifest(out, "grid", args.argv, config, extra={"grid": {k: list(v) for k, v in grid.items()}})
    return 0


def cmd_make_synthetic(args) -> int:
    import dataclasses

    from .synthetic import generate_synthetic

    config = _load_base_config(args)
    spec = config.data.synthetic or SyntheticSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = _out_dir(args, config)
    path_x, path_y = write_domain_csvs(spec, out)
    save_dataset(generate_synthetic(spec), out / "dataset.json")
    _write_manifest(out, "make-synthetic", args.argv, config,
                    extra={"spec": dataclasses.asdict(spec)})
    print(f"wrote {path_x} and {path_y}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cider",
        description="cross-domain recommender: training and evaluation harness",
    )
    parser.add_argument("--version", action="version", version=version_string())
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--config", help="experiment config file (YAML)")
        sub.add_argument("--seed", type=int, help="override the run seed")
        sub.add_argument("--out", help="output directory (CIDER_OUT env wins)")
        sub.add_argument(
            "--param",
            action="append",
            metavar="KEY=VALUE",
            help="config override, repeatable; grid accepts comma lists",
        )

    sub = commands.add_parser("train", help="train a model and save a checkpoint")
    common(sub)
    sub.add_argument("--variant", choices=VARIANT_SEQUENCE, help="ablation variant")
    sub.set_defaults(handler=cmd_train)

    sub = commands.add_parser("evaluate", help="rank held-out items from a checkpoint")
    common(sub)
    sub.add_argument("--checkpoint", required=True, help="checkpoint directory")
    sub.add_argument("--mode", choices=("test", "validation"), default="test")
    sub.set_defaults(handler=cmd_evaluate)

    sub = commands.add_parser("ablate", help="run variants A-E plus full")
    common(sub)
    sub.set_defaults(handler=cmd_ablate)

    sub = commands.add_parser("overlap-sweep", help="retrain across overlap ratios")
    common(sub)
    sub.add_argument("--ratio", action="append", type=int, help="percentage, repeatable")
    sub.set_defaults(handler=cmd_overlap_sweep)

    sub = commands.add_parser("grid", help="cartesian sweep over --param lists")
    common(sub)
    sub.set_defaults(handler=cmd_grid)

    sub = commands.add_parser("make-synthetic", help="write synthetic domain CSVs")
    common(sub)
    sub.set_defaults(handler=cmd_make_synthetic)

    return parser


def run_command(argv) -> int:
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_code:
        return int(exit_code.code or 0)
    args.argv = argv
    try:
        return args.handler(args)
    except CiderError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
