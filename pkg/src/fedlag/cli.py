"""Command line: run one experiment, sweep a knob, or validate a config.

Exit codes: 0 on success, 2 for configuration problems (bad JSON, unknown
keys, invalid values, bad overrides), 3 for runtime failures.
"""

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, apply_overrides, load_config_file, validate_config
from .outputs import accuracy_deficit, write_run_outputs, write_sweep_csv
from .simulate import load_checkpoint, run_experiment, save_checkpoint

log = logging.getLogger("fedlag")

SWEEP_AXES = ("k", "xi", "position")


def build_parser():
    p = argparse.ArgumentParser(
        prog="fedlag",
        description="Deterministic federated-learning simulator with "
        "layer-wise conflict analysis",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment JSON file")
        sp.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override a dotted config path (repeatable)",
        )
        sp.add_argument("--quiet", action="store_true", help="warnings only")

    run = sub.add_parser("run", help="run one experiment")
    common(run)
    run.add_argument("--out", help="output directory (overrides output.dir)")
    run.add_argument(
        "--timing", action="store_true",
        help="write measured wall_ms into metrics.csv (breaks byte-reproducibility)",
    )
    run.add_argument("--checkpoint", help="write a FLSIM1 checkpoint here at the end")
    run.add_argument("--resume", help="resume from a FLSIM1 checkpoint")

    sweep = sub.add_parser("sweep", help="run one config across an axis of values")
    common(sweep)
    sweep.add_argument("--out", help="output directory (overrides output.dir)")
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument(
        "--values", required=True,
        help="comma-separated axis values, e.g. 0,3,5,10,15 or first,middle,last",
    )

    val = sub.add_parser("validate", help="check a config and print it normalized")
    common(val)
    return p


def _load(args):
    raw = load_config_file(args.config)
    apply_overrides(raw, args.overrides)
    if getattr(args, "out", None):
        raw.setdefault("output", {})
        if not isinstance(raw["output"], dict):
            raise ConfigError("output: expected an object")
        raw["output"]["dir"] = args.out
    return raw, validate_config(raw)


def cmd_run(args):
    _, cfg = _load(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = run_experiment(cfg, resume=resume)
    out = write_run_outputs(cfg.output.dir, result, timing=args.timing)
    if args.checkpoint:
        save_checkpoint(
            args.checkpoint,
            next_round=result.final.round_index + 1,
            seed=cfg.train.seed,
            global_model=result.global_model,
            models=result.models,
        )
    final = result.final
    log.info(
        "done: %d rounds, mean_acc %.4f, global_loss %.4f -> %s",
        len(result.records), final.mean_acc, final.global_loss, out,
    )
    return 0


def _parse_values(axis, text):
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ConfigError("--values: nothing to sweep")
    try:
        if axis == "k":
            return [int(v) for v in items]
        if axis == "xi":
            return [float(v) for v in items]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc
    for v in items:
        if v not in ("first", "middle", "last"):
            raise ConfigError(f"--values: bad position {v!r}")
    return items


def _row(label, result):
    final = result.final
    return {
        "label": label,
        "mean_acc": final.mean_acc,
        "std_acc": final.std_acc,
        "mean_loss": final.mean_loss,
        "global_loss": final.global_loss,
        "pd": 0.0,
    }


def cmd_sweep(args):
    raw, cfg = _load(args)
    if cfg.strategy.name != "fedlag":
        raise ConfigError(
            f"sweep needs a fedlag base config as reference, got {cfg.strategy.name!r}"
        )
    values = _parse_values(args.axis, args.values)
    if args.axis == "position" and cfg.strategy.k < 1:
        raise ConfigError("strategy.k: position sweep needs k >= 1 for the fixed runs")
    out_root = Path(cfg.output.dir)

    def sub_config(value):
        sub = copy.deepcopy(raw)
        strat = sub.setdefault("strategy", {})
        if args.axis == "k":
            strat["k"] = value
        elif args.axis == "xi":
            strat["xi"] = value
        else:
            strat["name"] = "fixed"
            strat["position"] = value
        sub.setdefault("output", {})["dir"] = str(out_root / f"{args.axis}_{value}")
        return validate_config(sub)

    base = copy.deepcopy(raw)
    base.setdefault("output", {})["dir"] = str(out_root / "fedlag")
    base_cfg = validate_config(base)
    log.info("sweep %s over %s (+ fedlag reference)", args.axis, values)
    ref = run_experiment(base_cfg)
    write_run_outputs(base_cfg.output.dir, ref)
    rows = [_row("fedlag", ref)]

    base_value = {"k": cfg.strategy.k, "xi": cfg.strategy.xi}.get(args.axis)
    for value in values:
        if args.axis in ("k", "xi") and value == base_value:
            result = ref  # identical config: reuse the reference run
        else:
            sub_cfg = sub_config(value)
            result = run_experiment(sub_cfg)
            write_run_outputs(sub_cfg.output.dir, result)
        rows.append(_row(f"{args.axis}={value}", result))
        log.info("  %s=%s: mean_acc %.4f", args.axis, value, result.final.mean_acc)

    for row in rows:
        row["pd"] = accuracy_deficit(rows[0]["mean_acc"], row["mean_acc"])
    out_root.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out_root / "sweep.csv", rows)
    log.info("wrote %s", out_root / "sweep.csv")
    return 0


def cmd_validate(args):
    _, cfg = _load(args)
    print(json.dumps(cfg.echo, indent=2, sort_keys=True))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        return cmd_validate(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything past validation is a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
