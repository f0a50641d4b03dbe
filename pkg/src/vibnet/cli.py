"""Command-line entry point.

Subcommands: train, sweep-beta-n, sweep-corruption, verify-bounds,
nuisance-mi, report. Every command takes --config PATH (a TOML file
overriding the defaults), --out DIR, --seed, --jobs, and --dump-config
(print the merged config as TOML and exit). Exit codes: 0 success,
1 failed cells or failed checks, 2 invalid config or arguments,
3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import data_io, experiments, vnn
from .experiments import ConfigError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def dump_toml(cfg: dict) -> str:
    """Serialize the merged config (scalars and tables of scalars)."""
    lines = []
    for key, value in cfg.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in cfg.items():
        if isinstance(value, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for sub, subval in value.items():
                lines.append(f"{sub} = {_toml_value(subval)}")
    return "\n".join(lines) + "\n"


def load_config(args) -> dict:
    overrides = {}
    if args.config:
        try:
            with open(args.config, "rb") as f:
                overrides = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}")
    cfg = experiments.merge_config(overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    return experiments.validate_config(cfg)


def _out_dir(cfg: dict) -> str:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    return out


def cmd_train(cfg: dict) -> int:
    """Train one cell; write checkpoint plus per-epoch history CSV."""
    out = _out_dir(cfg)
    # label_mode comes from the sweep section so a single sweep cell can
    # be reproduced exactly by cmd_train with the same config.
    row = experiments._train_cell(
        cfg, float(cfg["train"]["beta"]), int(cfg["dataset"]["n_train"]),
        cfg["sweep"]["label_mode"], 0.0)
    net, history = row.pop("_net"), row.pop("_history")
    structure, tensors = vnn.network_payload(net)
    ckpt = data_io.Checkpoint(
        version=data_io.CHECKPOINT_VERSION,
        spec=structure,
        tensors=tensors,
        provenance={"command": "train", "beta": cfg["train"]["beta"],
                    "seed": cfg["seed"], "n_train": cfg["dataset"]["n_train"]},
    )
    data_io.save_checkpoint(os.path.join(out, "model.ckpt"), ckpt)
    experiments.write_csv(os.path.join(out, "history.csv"),
                          experiments.history_rows(history), experiments.HISTORY_COLUMNS)
    print(f"trained beta={cfg['train']['beta']} n={cfg['dataset']['n_train']}: "
          f"train_acc={row['train_acc']:.4f} info_nats={row['info_nats']:.2f}")
    return EXIT_OK


def cmd_sweep_beta_n(cfg: dict) -> int:
    out = _out_dir(cfg)
    rows = experiments.run_beta_n_sweep(cfg)
    path = os.path.join(out, "sweep_beta_n.csv")
    experiments.write_csv(path, rows, experiments.SWEEP_COLUMNS)
    failures = [r for r in rows if r["error"]]
    print(f"{len(rows)} cells -> {path}" + (f", {len(failures)} failed" if failures else ""))
    return EXIT_FAILED if failures else EXIT_OK


def cmd_sweep_corruption(cfg: dict) -> int:
    out = _out_dir(cfg)
    rows = experiments.run_corruption_sweep(cfg)
    path = os.path.join(out, "sweep_corruption.csv")
    experiments.write_csv(path, rows, experiments.SWEEP_COLUMNS)
    failures = [r for r in rows if r["error"]]
    print(f"{len(rows)} corruption cells -> {path}"
          + (f", {len(failures)} failed" if failures else ""))
    return EXIT_FAILED if failures else EXIT_OK


def cmd_verify_bounds(cfg: dict) -> int:
    out = _out_dir(cfg)
    report = experiments.run_bounds_verification(cfg)
    path = os.path.join(out, "bounds_report.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    print(f"{len(report['checks'])} checks -> {path}"
          + (f", FAILED: {', '.join(failed)}" if failed else ", all passed"))
    return EXIT_FAILED if failed else EXIT_OK


def cmd_nuisance_mi(cfg: dict) -> int:
    out = _out_dir(cfg)
    rows = experiments.run_nuisance_experiment(cfg)
    path = os.path.join(out, "nuisance_mi.csv")
    experiments.write_csv(path, rows, experiments.NUISANCE_COLUMNS)
    failures = [r for r in rows if r["error"]]
    print(f"{len(rows)} rows -> {path}" + (f", {len(failures)} failed" if failures else ""))
    return EXIT_FAILED if failures else EXIT_OK


def cmd_report(cfg: dict, inputs: list) -> int:
    out = _out_dir(cfg)
    summary = experiments.merge_reports(inputs)
    path = os.path.join(out, "report.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    tb = summary.get("transition_beta")
    print(f"merged {len(inputs)} files -> {path}"
          + (f", transition_beta={tb}" if tb is not None else ""))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vibnet",
        description="Train noisy-weight networks and verify their information bounds.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train a single configuration"),
        ("sweep-beta-n", "grid over beta and sample count"),
        ("sweep-corruption", "grid over label-corruption levels"),
        ("verify-bounds", "run every bound and identity check"),
        ("nuisance-mi", "nuisance-invariance experiment plus calibration"),
        ("report", "merge sweep CSVs into a JSON summary"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file overriding defaults")
        p.add_argument("--out", help="output directory (default: runs)")
        p.add_argument("--seed", type=int, help="base seed override")
        p.add_argument("--jobs", type=int, help="parallel cells for sweeps")
        p.add_argument("--dump-config", action="store_true",
                       help="print the merged config as TOML and exit")
        if name == "report":
            p.add_argument("inputs", nargs="*", help="sweep CSV files to merge")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage already; normalize other codes
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dump_config:
        sys.stdout.write(dump_toml(cfg))
        return EXIT_OK
    start = time.perf_counter()
    try:
        if args.command == "train":
            code = cmd_train(cfg)
        elif args.command == "sweep-beta-n":
            code = cmd_sweep_beta_n(cfg)
        elif args.command == "sweep-corruption":
            code = cmd_sweep_corruption(cfg)
        elif args.command == "verify-bounds":
            code = cmd_verify_bounds(cfg)
        elif args.command == "nuisance-mi":
            code = cmd_nuisance_mi(cfg)
        else:
            code = cmd_report(cfg, args.inputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        # unreadable input or unwritable output directory
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except vnn.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"done in {time.perf_counter() - start:.1f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
