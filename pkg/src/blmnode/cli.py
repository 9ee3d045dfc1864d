"""Command-line front end: ``blmnode <subcommand> ...``.

Subcommands mirror the library: ``fx`` (format notation), ``calibrate`` and
``plan`` (quant), ``estimate`` (perf), ``serve``/``replay``/``report`` (node).
"""
from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading

from . import fxp, node, perf, quant, workbench
from .errors import BlmNodeError
from .nn import load_descriptor, read_weight_file


def _read(path: str) -> str:
    with open(path) as f:
        return f.read()


def _write(path: str, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)


def _target(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


# ---------------------------------------------------------------------------
# subcommands

def cmd_fx(args) -> int:
    spec = fxp.parse_spec(args.spec)
    if args.truncate:
        spec = fxp.make_spec(spec.total_bits, spec.integer_bits, fxp.Rounding.TRUNCATE,
                             spec.overflow)
    if args.wrap:
        spec = fxp.make_spec(spec.total_bits, spec.integer_bits, spec.rounding,
                             fxp.Overflow.WRAP)
    print(f"{spec}  W={spec.total_bits} I={spec.integer_bits} F={spec.frac_bits}")
    print(f"ulp    {spec.ulp!r}")
    print(f"range  [{spec.min_value!r}, {spec.max_value!r}]")
    print(f"modes  {spec.rounding.value}, {spec.overflow.value}")
    for x in args.values:
        v, flag = fxp.quantize(x, spec)
        print(f"{x!r} -> {v.real!r} (code {v.code}{', overflow' if flag else ''})")
    return 0


def _load_model(args):
    desc = load_descriptor(_read(args.model))
    return read_weight_file(args.weights, desc)


def cmd_calibrate(args) -> int:
    model = _load_model(args)
    frames = workbench.read_frames_csv(args.frames)
    prof = quant.profile(model, frames, percentile=args.percentile)
    _write(args.out, prof.to_json())
    print(f"profiled {prof.sample_count} frames over {len(prof.max_abs)} layers -> {args.out}")
    return 0


def cmd_plan(args) -> int:
    prof = quant.CalibrationProfile.from_json(_read(args.profile))
    rounding = fxp.Rounding.TRUNCATE if args.truncate else fxp.Rounding.NEAREST_EVEN
    overflow = fxp.Overflow.WRAP if args.wrap else fxp.Overflow.SATURATE
    plan = quant.plan_precision(prof, args.bits, args.guard, rounding, overflow)
    text = plan.to_json()
    if args.out:
        _write(args.out, text)
        for name, spec in plan.specs.items():
            print(f"{name:<12} {spec}  (max_abs {prof.max_abs[name]:.6g})")
    else:
        print(text)
    return 0


def cmd_estimate(args) -> int:
    desc = load_descriptor(_read(args.model))
    plan = quant.PrecisionPlan.from_json(_read(args.plan)) if args.plan else None
    reuse = perf.ReuseMap.parse(args.rf_default, args.rf)
    est = perf.estimate_model(desc, reuse, plan, args.clock, perf.Schedule(args.schedule))
    print(est.to_text())
    if args.deadline is not None:
        b = perf.check_budget(est, args.deadline)
        print(f"budget {'PASS' if b.passed else 'FAIL'}: latency {b.latency_s * 1e3:.4f} ms, "
              f"deadline {b.deadline_s * 1e3:.4f} ms, slack {b.slack_s * 1e3:.4f} ms")
    if args.csv:
        _write(args.csv, est.to_csv())
    return 0


def cmd_serve(args) -> int:
    config = node.NodeConfig.from_json(_read(args.config))
    if args.records:
        config.records_path = args.records
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())

    def ready(service):
        host, port = service.address
        print(f"listening on {host}:{port}, emitting to {config.emit_host}:{config.emit_port}",
              flush=True)

    stats = node.serve(config, stop, ready=ready)
    print(stats.to_text() if stats else "no frames processed", flush=True)
    return 0


def cmd_replay(args) -> int:
    frames = workbench.read_frames_csv(args.frames) if args.frames else None
    rep = node.replay(args.target, args.fps, args.count, args.seed, frames,
                      standardized=not args.raw)
    print(f"sent {rep.sent} frames in {rep.duration_s:.4f} s: {rep.achieved_fps:.3f} fps "
          f"(nominal {rep.nominal_fps:g}, rate error {rep.rate_error:+.3%})")
    return 0


def cmd_report(args) -> int:
    records = node.read_records_csv(args.records)
    stats = node.stats_report(records, int(args.deadline * 1e9),
                              use_engine_latency=args.engine_latency)
    print(stats.to_text())
    if args.plot:
        os.makedirs(args.plot, exist_ok=True)
        centres = [(e + stats.hist_bin_ns / 2) * 1e-6 for e in stats.hist_edges_ns[:-1]]
        workbench.write_two_column(os.path.join(args.plot, "latency_hist.dat"), centres,
                                   stats.hist_counts, "latency_ms count (50 us bins)")
        fixture = workbench.heterogeneous_fixture(n_calibration=args.sweep_frames,
                                                  n_eval=args.sweep_frames)
        rows = workbench.bits_sweep(fixture.model, fixture.calibration, fixture.evaluation)
        bits = [r.total_bits for r in rows]
        workbench.write_two_column(os.path.join(args.plot, "accuracy_mi.dat"), bits,
                                   [r.accuracy_mi for r in rows], "total_bits accuracy_mi")
        workbench.write_two_column(os.path.join(args.plot, "accuracy_rr.dat"), bits,
                                   [r.accuracy_rr for r in rows], "total_bits accuracy_rr")
        workbench.write_two_column(os.path.join(args.plot, "outliers.dat"), bits,
                                   [r.outliers for r in rows], "total_bits outliers")
        print(f"plot data written to {args.plot}/")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blmnode", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fx", help="parse and describe a fixed-point format such as fx<16,7>")
    s.add_argument("spec")
    s.add_argument("values", nargs="*", type=float, help="reals to quantize under the format")
    s.add_argument("--truncate", action="store_true")
    s.add_argument("--wrap", action="store_true")
    s.set_defaults(func=cmd_fx)

    s = sub.add_parser("calibrate", help="profile per-layer max |output| on frames")
    s.add_argument("--model", required=True, help="descriptor JSON")
    s.add_argument("--weights", required=True, help="weight file")
    s.add_argument("--frames", required=True, help="frames CSV, one frame per row")
    s.add_argument("--out", required=True, help="profile JSON to write")
    s.add_argument("--percentile", type=float, default=None)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("plan", help="derive a layer-based precision plan from a profile")
    s.add_argument("--profile", required=True)
    s.add_argument("--bits", type=int, default=16)
    s.add_argument("--guard", type=int, default=0)
    s.add_argument("--truncate", action="store_true")
    s.add_argument("--wrap", action="store_true")
    s.add_argument("--out", default=None, help="plan JSON (printed if omitted)")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("estimate", help="reuse-factor resource and latency estimate")
    s.add_argument("--model", required=True)
    s.add_argument("--plan", default=None)
    s.add_argument("--rf-default", type=int, default=32)
    s.add_argument("--rf", default="", help='overrides, e.g. "dense*:260,sigmoid*:260"')
    s.add_argument("--clock", type=float, default=perf.DEFAULT_CLOCK_HZ)
    s.add_argument("--schedule", choices=[m.value for m in perf.Schedule],
                   default=perf.Schedule.SEQUENTIAL.value)
    s.add_argument("--deadline", type=float, default=None, help="seconds")
    s.add_argument("--csv", default=None, help="also write the table as CSV")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("serve", help="run the UDP inference node until interrupted")
    s.add_argument("--config", required=True)
    s.add_argument("--records", default=None, help="write latency records CSV on shutdown")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("replay", help="send frames at a fixed rate")
    s.add_argument("--fps", type=float, default=320.0)
    s.add_argument("--count", type=int, default=3200)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--frames", default=None, help="frames CSV instead of synthetic frames")
    s.add_argument("--raw", action="store_true", help="synthesize raw-range frames")
    s.add_argument("--target", type=_target, default=("127.0.0.1", 9260))
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("report", help="summarize a latency records CSV")
    s.add_argument("--records", required=True)
    s.add_argument("--deadline", type=float, default=3e-3, help="seconds")
    s.add_argument("--engine-latency", action="store_true",
                   help="summarize engine latency instead of end-to-end")
    s.add_argument("--plot", default=None, metavar="DIR",
                   help="write two-column latency and accuracy-vs-bits data files")
    s.add_argument("--sweep-frames", type=int, default=200)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (BlmNodeError, OSError, ValueError) as e:
        print(f"blmnode: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
