"""Command line entry point: ``halo <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .dvfs import LEVEL_TABLES, DvfsSchedule, load_levels
from .errors import HaloError
from .mac import (DEFAULT_ACC_PATTERN, Exhaustive, RandomSamples, calibrate_profile, characterize,
                  default_profile, load_profile, save_profile)
from .pipeline import (GoalConfig, emit_report, load_container, run_pipeline, save_container,
                       schedule_for, sweep, synthetic_container)
from .quantizer import load_model, quantize_model, save_model
from .simulator import ArrayConfig, simulate

log = logging.getLogger("halo")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemExit(f"error: cannot read {path}: {exc}")


def _config(args) -> tuple[GoalConfig, ArrayConfig | None]:
    doc = _read_json(args.config) if args.config else {}
    array = doc.pop("array", None)
    if getattr(args, "goal", None):
        doc["goal"] = args.goal
    goal = GoalConfig.from_dict(doc)
    return goal, (ArrayConfig(**array) if array is not None else None)


def _profile(args):
    return load_profile(args.profile) if args.profile else default_profile()


def _shapes(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(","):
        r, c = part.lower().split("x")
        out.append((int(r), int(c)))
    return out


def cmd_characterize(args) -> int:
    sampling = RandomSamples(args.samples, args.seed) if args.samples else Exhaustive()
    profile = characterize(sampling=sampling, acc=args.acc, workers=args.workers)
    if not args.raw:
        profile = calibrate_profile(profile, args.calibrate_count, args.calibrate_ghz)
    save_profile(profile, args.out)
    log.info("wrote %s (delay %d..%d ps)", args.out, profile.delay_ps.min(), profile.delay_ps.max())
    return 0


def cmd_synth(args) -> int:
    container = synthetic_container(args.seed, _shapes(args.layers), args.block, args.spread)
    save_container(container, args.out)
    log.info("wrote %d layers to %s", len(container.layers), args.out)
    return 0


def cmd_quantize(args) -> int:
    goal, _ = _config(args)
    container = load_container(args.container)
    profile = _profile(args)
    retention = args.retention
    if retention is None:
        retention = run_pipeline(container, goal, profile).retention
    out = Path(args.out)
    for layer in container.layers:
        model = quantize_model(layer.weight, layer.gradient, goal.quant_config(retention), profile,
                               name=layer.name)
        save_model(model, out / layer.name)
        log.info("%s: k=%.4f, overlay nnz=%d", layer.name, model.k_fraction, model.overlay.nnz)
    return 0


def cmd_schedule(args) -> int:
    goal, _ = _config(args)
    levels = load_levels(args.levels)[1] if args.levels else None
    model = load_model(args.model)
    schedule = schedule_for(model, goal, _profile(args), levels)
    Path(args.out).write_text(json.dumps(schedule.to_json(), indent=1) + "\n")
    return 0


def cmd_simulate(args) -> int:
    goal, array = _config(args)
    if args.array:
        array = ArrayConfig(**_read_json(args.array))
    if array is None:
        array = ArrayConfig(v_ref=min(lv.voltage_v for lv in LEVEL_TABLES[goal.dvfs_target]))
    model = load_model(args.model)
    schedule = DvfsSchedule.from_json(_read_json(args.schedule))
    report = simulate(model, schedule, array, _profile(args))
    Path(args.out).write_text(json.dumps(report.to_json(), indent=1) + "\n")
    return 0


def cmd_sweep(args) -> int:
    goal, array = _config(args)
    points = sweep(load_container(args.container), goal, _profile(args), array)
    lines = ["retention,normalized_perf,proxy_loss,b_eff"]
    lines += [f"{p.retention!r},{p.normalized_perf!r},{p.proxy_loss!r},{p.b_eff!r}" for p in points]
    Path(args.out).write_text("\n".join(lines) + "\n")
    return 0


def cmd_report(args) -> int:
    goal, array = _config(args)
    result = run_pipeline(load_container(args.container), goal, _profile(args), array)
    emit_report(result, args.out)
    if result.knee_fallback:
        log.warning("knee detection fell back to the lowest-loss point")
    m = result.metrics()
    log.info("%s: retention %.4f, speedup %.4f, proxy loss %.6g", m["goal"], m["retention"],
             m["normalized_perf"], m["proxy_loss"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of goal settings (and an optional 'array' object)")
    common.add_argument("--seed", type=int, default=0, help="seed for sampling and synthetic data")
    common.add_argument("--profile", help="weight profile JSON (default: bundled profile)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="halo", description="Hardware-aware post-training quantization")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("characterize", parents=[common], help="build a weight timing/energy profile")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--exhaustive", action="store_true", help="all 65,536 activation transitions (default)")
    mode.add_argument("--samples", type=int, help="random transitions per weight value")
    p.add_argument("--acc", type=lambda s: int(s, 0), default=DEFAULT_ACC_PATTERN, help="pinned accumulator")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--raw", action="store_true", help="skip delay calibration")
    p.add_argument("--calibrate-count", type=int, default=9, help="values that must meet --calibrate-ghz")
    p.add_argument("--calibrate-ghz", type=float, default=3.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic tensor container")
    p.add_argument("--layers", default="1024x1024,1024x2048", help="comma-separated ROWSxCOLS")
    p.add_argument("--block", type=int, default=32, help="gradient clustering block size")
    p.add_argument("--spread", type=float, default=1.5, help="log-std of block gradient gain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("quantize", parents=[common], help="quantize every layer of a container")
    p.add_argument("--container", required=True)
    p.add_argument("--goal", choices=["perf-opt", "acc-opt", "bal"])
    p.add_argument("--retention", type=float, help="override the goal's retention")
    p.add_argument("--out", required=True, help="output directory (one model per layer)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("schedule", parents=[common], help="build a DVFS schedule for a quantized model")
    p.add_argument("--model", required=True)
    p.add_argument("--levels", help="level table JSON (default: config dvfs_target)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", parents=[common], help="simulate a model under a schedule")
    p.add_argument("--model", required=True)
    p.add_argument("--schedule", required=True)
    p.add_argument("--array", help="array config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common], help="retention sweep to a Pareto CSV")
    p.add_argument("--container", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="full pipeline run with report files")
    p.add_argument("--container", required=True)
    p.add_argument("--goal", choices=["perf-opt", "acc-opt", "bal"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (HaloError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
