"""Command-line front end: single runs, parameter sweeps, and the defense matrix.

Config files are flat ``key = value`` text mirroring ExperimentConfig field
names; ``--set key=value`` flags override file values.  Outputs are one
metrics CSV per trial plus a summary CSV, with stable columns.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from flrlab.harness import (
    ConfigError,
    ExperimentConfig,
    config_from_mapping,
    config_hash,
    format_float,
    run_experiment,
    write_summary_csv,
    write_trial_csv,
)

SWEEPABLE = (
    "compromised",
    "label_bias",
    "trim_count",
    "support_radius",
    "local_rounds",
    "devices_per_round",
    "poison_fraction",
    "learning_rate",
    "num_devices",
    "iterations",
)


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def _load_config(args) -> ExperimentConfig:
    mapping = parse_config_file(args.config) if args.config else {}
    config = config_from_mapping(mapping)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if overrides:
        config = config_from_mapping(overrides, base=config)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def _run_and_write(config: ExperimentConfig, out_dir: Path, tag: str = "") -> float:
    result = run_experiment(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = f"{tag}_" if tag else ""
    for i, trial in enumerate(result.trial_results):
        write_trial_csv(trial.records, out_dir / f"{prefix}trial_{i:02d}.csv")
    write_summary_csv(result, out_dir / f"{prefix}summary.csv")
    return result.mean_final_test_error


def cmd_run(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out)
    error = _run_and_write(config, out_dir)
    print(f"run {config_hash(config)}: mean final test error {format_float(error)} -> {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    base = _load_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        config = config_from_mapping({args.param: value}, base=base)
        error = _run_and_write(config, out_dir, tag=f"{args.param}_{value}")
        rows.append((value, error))
        print(f"sweep {args.param}={value}: mean final test error {format_float(error)}")
    with open(out_dir / "sweep.csv", "w") as fh:
        fh.write(f"{args.param},mean_final_test_error\n")
        for value, error in rows:
            fh.write(f"{value},{format_float(error)}\n")
    errors = [e for _, e in rows]
    trend = "non-decreasing" if all(b >= a - 1e-12 for a, b in zip(errors, errors[1:])) else "not monotone"
    print(f"sweep over {args.param}: error trend {trend}")
    return 0


def cmd_defend(args) -> int:
    base = _load_config(args)
    assumed_rules = [r.strip() for r in args.assumed.split(",") if r.strip()]
    actual_rules = [r.strip() for r in args.actual.split(",") if r.strip()]
    defenses = [d.strip() for d in args.defenses.split(",") if d.strip()]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["actual_rule,defense,attacker_assumed_rule,mean_final_test_error"]
    for rule in actual_rules:
        for defense in defenses:
            row_base = replace(base, rule=rule, defense=defense)
            no_attack = replace(row_base, attack="none")
            error = _run_and_write(no_attack, out_dir, tag=f"{rule}_{defense}_noattack")
            lines.append(f"{rule},{defense},none,{format_float(error)}")
            print(f"defend {rule}+{defense} vs none: {format_float(error)}")
            for assumed in assumed_rules:
                attacked = replace(row_base, attack="craft", attack_rule=assumed, knowledge=args.knowledge)
                error = _run_and_write(attacked, out_dir, tag=f"{rule}_{defense}_{assumed}")
                lines.append(f"{rule},{defense},{assumed},{format_float(error)}")
                print(f"defend {rule}+{defense} vs {assumed} attack: {format_float(error)}")
    (out_dir / "defend.csv").write_text("\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flrlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        p.add_argument("--seed", type=int, required=seed_required, help="master seed")
        p.add_argument("--out", default="out", help="output directory")

    p_run = sub.add_parser("run", help="run a single experiment")
    common(p_run, seed_required=True)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid over one config parameter")
    common(p_sweep, seed_required=False)
    p_sweep.add_argument("--param", required=True, choices=SWEEPABLE)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.set_defaults(func=cmd_sweep)

    p_defend = sub.add_parser("defend", help="attacker-assumed rule x actual rule+defense matrix")
    common(p_defend, seed_required=False)
    p_defend.add_argument("--assumed", default="krum,trimmed_mean", help="attacker's assumed rules")
    p_defend.add_argument("--actual", default="krum,trimmed_mean,median", help="actual aggregation rules")
    p_defend.add_argument("--defenses", default="none,err,lfr,union", help="defense filters to row")
    p_defend.add_argument("--knowledge", default="partial", choices=("full", "partial"))
    p_defend.set_defaults(func=cmd_defend)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
