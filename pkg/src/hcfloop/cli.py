"""Command-line entry point: ``hcfloop run|presets|latency-report``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from hcfloop import __version__
from hcfloop.experiment import PRESET_NOTES, PRESETS, ConfigError, parse_config, run_sweep, write_results
from hcfloop.fiber import group_delay, make_preset
from hcfloop.loop import DEFAULT_OVERHEAD_DELAY_US, read_trace
from hcfloop.metrics import MetricsError, compare_latency, extract_latency

logger = logging.getLogger("hcfloop")


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    out = args.out if args.out is not None else cfg.output_dir
    logger.info("running %d loop runs (%s mode, %d workers)",
                len(cfg.fut_kinds) * len(cfg.launch_power_list_dbm) * len(cfg.seeds),
                cfg.scale, cfg.workers)
    result = run_sweep(cfg)
    written = write_results(result, out, figures=not args.no_figures)
    failed = [r for r in result.records if r.error]
    print(f"{len(result.records)} points written to {written['results']}")
    for r in failed:
        print(f"  failed: {r.fut_kind} {r.launch_power_dbm:g} dBm {r.n_loops} loops: {r.error}")
    return 1 if failed and len(failed) == len(result.records) else 0


def _cmd_presets(args) -> int:
    if args.action == "list":
        for name in PRESETS:
            print(f"{name:12s} {PRESET_NOTES.get(name, '')}")
        return 0
    if args.name not in PRESETS:
        raise ConfigError(f"unknown preset {args.name!r}")
    print("[experiment]")
    print(f"preset = {args.name}")
    for key, value in PRESETS[args.name].items():
        if isinstance(value, tuple):
            value = ", ".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
        print(f"# {key} = {value}")
    return 0


def _cmd_latency(args) -> int:
    common = args.common_delay_us
    if common is None:
        common = group_delay(make_preset("buffering_smf")) * 1e6 + DEFAULT_OVERHEAD_DELAY_US
    reports = []
    for path in (args.trace_a, args.trace_b):
        trace = read_trace(path)
        reports.append(extract_latency(trace, args.fut_km, common, use_markers=args.use_markers))
    ref, other = reports[0], compare_latency(reports[0], reports[1])
    for name, rep in ((args.trace_a, ref), (args.trace_b, other)):
        print(f"{name}: {rep.n_spikes} loops, per-loop {rep.per_loop_delay_us:.3f} us, "
              f"total {rep.total_duration_us:.1f} us, FUT latency {rep.per_km_latency_us:.3f} us/km")
        for w in rep.warnings:
            print(f"  warning: {w}")
    print(f"differential (B - A): {other.differential_us_per_km:+.3f} us/km")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcfloop", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a sweep from a config file")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=None, help="parallel loop runs")
    run.add_argument("--out", default=None, help="output directory (overrides the config)")
    run.add_argument("--no-figures", action="store_true", help="skip the matplotlib figures")
    run.set_defaults(func=_cmd_run)

    pre = sub.add_parser("presets", help="list or show built-in sweep presets")
    pre.add_argument("action", choices=["list", "show"])
    pre.add_argument("name", nargs="?")
    pre.set_defaults(func=_cmd_presets)

    lat = sub.add_parser("latency-report", help="compare FUT latency from two monitor traces")
    lat.add_argument("trace_a", help="reference trace (e.g. the HCF loop)")
    lat.add_argument("trace_b", help="comparison trace (e.g. the SMF loop)")
    lat.add_argument("--fut-km", type=float, required=True)
    lat.add_argument("--common-delay-us", type=float, default=None,
                     help="per-loop delay outside the FUT (default: buffering SMF + overhead)")
    lat.add_argument("--use-markers", action="store_true",
                     help="use the marker sidecar instead of detecting spikes")
    lat.set_defaults(func=_cmd_latency)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets" and args.action == "show" and not args.name:
        print("presets show: a preset name is required", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, MetricsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
