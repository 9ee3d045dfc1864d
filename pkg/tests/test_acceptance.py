"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a one-line PASS/FAIL verdict; ``conftest.py`` prints them
in the terminal summary, and running this file as a script prints them too.
"""
import math
import re
import socket
import subprocess
import sys
import threading
import time
from fractions import Fraction

import numpy as np

from blmnode import bridge, fxp, nn, node, perf, quant
from blmnode import workbench as wb

VERDICTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, VERDICTS[n]


def oracle_code(x: float, spec: fxp.FixedSpec) -> int:
    """Round-half-even then saturate, on the exact rational value of ``x``."""
    scaled = Fraction(x) * 2 ** spec.frac_bits
    fl = math.floor(scaled)
    rem = scaled - fl
    code = fl + 1 if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and fl % 2) else fl
    return min(max(code, spec.min_code), spec.max_code)


# --- 1 --------------------------------------------------------------------------------------

def test_criterion_1_fixed_point_soundness():
    specs = [fxp.make_spec(16, 7), fxp.make_spec(18, 10)] + [fxp.make_spec(16, i) for i in range(1, 16)]
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, mismatches, bad_bounds = 0.0, 0, 0
    for spec in specs:
        # 90% in range, 10% beyond it on either side
        span = spec.max_value - spec.min_value
        x = rng.uniform(spec.min_value, spec.max_value, 1_000_000)
        wide = rng.integers(0, 10, x.size) == 0
        x[wide] = rng.uniform(spec.min_value - 4 * span, spec.max_value + 4 * span, wide.sum())
        codes, over = fxp.quantize_array(x, spec)
        inside = (x >= spec.min_value) & (x <= spec.max_value)
        # x * 2**f is exact; the difference to a nearby integer is exact too
        err = np.abs(np.ldexp(x[inside], spec.frac_bits) - codes[inside])
        worst = max(worst, float(err.max()))
        hi = np.ldexp(x, spec.frac_bits) > spec.max_code + 0.5
        lo = np.ldexp(x, spec.frac_bits) < spec.min_code - 0.5
        bad_bounds += int(np.count_nonzero(codes[hi] != spec.max_code))
        bad_bounds += int(np.count_nonzero(codes[lo] != spec.min_code))
        bad_bounds += int(np.count_nonzero(~over[hi]) + np.count_nonzero(~over[lo]))
        # arbitrary-precision oracle on a sample, weighted towards the bounds
        idx = np.concatenate([rng.choice(x.size, 4000, replace=False), np.flatnonzero(hi | lo)[:2000]])
        mismatches += sum(oracle_code(float(x[i]), spec) != int(codes[i]) for i in idx)
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.5 and mismatches == 0 and bad_bounds == 0 and elapsed < 30
    verdict(1, ok, f"max |err| = {worst:.3f} ulp, oracle mismatches {mismatches}, "
                   f"bound errors {bad_bounds}, {len(specs)} specs x 1e6 in {elapsed:.1f} s")


# --- 2 --------------------------------------------------------------------------------------

def test_criterion_2_bridge_matches_infer_fixed():
    t0 = time.perf_counter()
    cases = [
        (nn.reference_mlp_descriptor(), {"dense1": 0.1, "dense2": 0.1}),
        (nn.reference_unet_descriptor(), wb.HETEROGENEOUS_SCALES),
    ]
    mismatches = 0
    for desc, scales in cases:
        model = nn.load_weights(wb.synth_weights(11, desc, scales), desc)
        prof = quant.profile(model, wb.synth_frames(12, 200))
        qm = quant.quantize_model(model, quant.plan_precision(prof, 16, 1))
        sim = bridge.BridgeSim(qm, bridge.TimingConfig.zero())
        for frame in wb.synth_frames(13, 1000, scale=2.0):
            out, _ = sim.run_transaction(frame)
            grid = fxp.codes_to_real(fxp.quantize_array(frame, sim.input_spec)[0], sim.input_spec)
            direct = nn.infer_fixed(qm, grid)
            if out.codes.tobytes() != direct.codes.tobytes() or out.decision != direct.decision:
                mismatches += 1
    elapsed = time.perf_counter() - t0
    verdict(2, mismatches == 0 and elapsed < 60,
            f"{mismatches} mismatches over 1000 frames x MLP, U-Net in {elapsed:.1f} s")


# --- 3 --------------------------------------------------------------------------------------

def test_criterion_3_quantization_ordering():
    fx = wb.heterogeneous_fixture()
    prof = quant.profile(fx.model, fx.calibration)
    vals = [v for v in prof.max_abs.values() if v > 0]
    octaves = math.log2(max(vals) / min(vals))
    wide, uni, layer = (r.accuracy for r in wb.table2_report(fx.model, fx.calibration, fx.evaluation).rows)
    ok = (octaves >= 6
          and layer.close_mi > uni.close_mi and layer.close_rr > uni.close_rr
          and layer.close_mi >= 0.95 and layer.close_rr >= 0.95
          and wide.close_mi >= layer.close_mi - 0.02 and wide.close_rr >= layer.close_rr - 0.02)
    verdict(3, ok, f"span {octaves:.2f} octaves; MI/RR layer {layer.close_mi:.2%}/{layer.close_rr:.2%}, "
                   f"uniform<16,7> {uni.close_mi:.2%}/{uni.close_rr:.2%}, "
                   f"uniform<18,10> {wide.close_mi:.2%}/{wide.close_rr:.2%}")


# --- 4 --------------------------------------------------------------------------------------

def test_criterion_4_guard_bits():
    fx = wb.overflow_fixture()
    prof = quant.profile(fx.model, fx.calibration)
    ref = nn.infer_float_batch(fx.model, fx.evaluation)
    outliers = {}
    for g in (0, 1):
        test, _ = nn.infer_fixed_batch(fx.model, fx.evaluation, quant.plan_precision(prof, 16, g))
        outliers[g] = wb.count_outliers(ref, test)
    calib_sat = {}
    for g in (1, 2, 3):
        _, log = nn.infer_fixed_batch(fx.model, fx.calibration, quant.plan_precision(prof, 16, g))
        calib_sat[g] = sum(n for _, n in log.items())
    ok = outliers[1] < outliers[0] and all(v == 0 for v in calib_sat.values())
    verdict(4, ok, f"outliers guard0 {outliers[0]}, guard1 {outliers[1]}; "
                   f"calibration saturations for guard 1..3: {list(calib_sat.values())}")


# --- 5 --------------------------------------------------------------------------------------

def test_criterion_5_reuse_factor_model():
    unet = nn.reference_unet_descriptor()
    rfs = [2 ** k for k in range(10)]
    failures = []
    for name in unet.layer_names:
        g = perf.geometry(unet, name)
        rows = [perf.estimate_layer(g, rf) for rf in rfs]
        for a, b in zip(rows, rows[1:]):
            if b.cycles < a.cycles or b.multipliers > a.multipliers:
                failures.append(f"{name}: not monotone")
        for r in rows:
            # each multiplier performs rf_eff products per kernel invocation
            if r.multipliers * r.rf * g.positions < g.mult_count:
                failures.append(f"{name}: too few multipliers at rf={r.rf}")
    dense = perf.estimate_layer(perf.dense_geometry(260, 128), 32).multipliers
    est = perf.estimate_model(unet, perf.table3_reuse_map(), clock_hz=100e6)
    ok = not failures and dense == 1_040 and 0.157e-3 <= est.latency_s <= 15.7e-3
    verdict(5, ok, f"{len(failures)} monotonicity/capacity failures, Dense 260->128 @ rf 32 = "
                   f"{dense} multipliers, U-Net latency {est.latency_s * 1e3:.3f} ms")


# --- 6 and 8 share one live run ------------------------------------------------------------------

_LIVE: dict = {}


def live_run():
    """3,200 frames at 320 fps from a separate process into the Quantized-MLP node."""
    if _LIVE:
        return _LIVE
    d = nn.reference_mlp_descriptor()
    m = nn.load_weights(wb.synth_weights(3, d, {"dense1": 0.1, "dense2": 0.1}), d)
    engine = node.Engine(node.EngineKind.QUANTIZED, m, quant.uniform_plan(d, 16, 7))
    rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    rx.bind(("127.0.0.1", 0))
    rx.settimeout(1.0)
    got = []

    def sink():
        while True:
            try:
                got.append(rx.recvfrom(4096)[0])
            except (socket.timeout, OSError):
                return

    svc = node.NodeService(node.NodeConfig(listen_port=0, emit_port=rx.getsockname()[1]), engine).start()
    t = threading.Thread(target=sink, daemon=True)
    t.start()
    host, port = svc.address
    proc = subprocess.run([sys.executable, "-m", "blmnode.cli", "replay", "--fps", "320",
                           "--count", "3200", "--seed", "7", "--target", f"{host}:{port}"],
                          capture_output=True, text=True, timeout=120)
    time.sleep(0.3)
    stats = svc.stop()
    t.join()
    rx.close()
    m = re.search(r"sent (\d+) frames in ([\d.]+) s", proc.stdout)
    _LIVE.update(svc=svc, stats=stats, emitted=len(got),
                 sent=int(m.group(1)) if m else 0, duration=float(m.group(2)) if m else float("nan"))
    return _LIVE


def test_criterion_6_realtime_service():
    run = live_run()
    svc, stats = run["svc"], run["stats"]
    accounted = svc.received == len(svc.records) + svc.dropped + svc.malformed
    ok = run["sent"] == 3200 and svc.received == 3200 and svc.dropped == 0 and accounted \
        and run["emitted"] == len(svc.records)
    p99 = stats.p99_ns * 1e-6
    target = "met" if p99 < 3.0 else "NOT met on this host"
    verdict(6, ok, f"received {svc.received} = processed {len(svc.records)} + dropped {svc.dropped} "
                   f"+ malformed {svc.malformed}; p99 {p99:.3f} ms, 3 ms target {target}")


def test_criterion_8_throughput_identity():
    run = live_run()
    stats, records = run["stats"], run["svc"].records
    wall = (max(r.egress_ns for r in records) - min(r.ingress_ns for r in records)) * 1e-9
    direct = len(records) / wall
    paced = len(records) / run["duration"]
    fps_1_74 = perf.fps_from_latency(1.74e-3)
    ok = (abs(stats.achieved_fps / direct - 1) <= 0.02 and abs(stats.achieved_fps / paced - 1) <= 0.02
          and round(fps_1_74) == 575)
    verdict(8, ok, f"stats fps {stats.achieved_fps:.2f}, frames/wall {direct:.2f}, "
                   f"frames/sender time {paced:.2f}; 1/1.74 ms = {fps_1_74:.1f} fps")


# --- 7 --------------------------------------------------------------------------------------

def test_criterion_7_latency_distribution():
    t0 = time.perf_counter()
    d = nn.reference_mlp_descriptor()
    m = nn.load_weights(wb.synth_weights(3, d, {"dense1": 0.1, "dense2": 0.1}), d)
    sim = bridge.BridgeSim(quant.quantize_model(m, quant.uniform_plan(d, 16, 7)), seed=7)
    frames = wb.synth_frames(21, 1000)
    lat = np.array([sim.run_transaction(frames[i % 1000])[1].total_latency_ns for i in range(10_000)])
    mean_ms = lat.mean() * 1e-6
    below = float(np.mean(lat < 2_000_000))
    elapsed = time.perf_counter() - t0
    ok = abs(mean_ms - 1.74) <= 0.1 and below > 0.99 and elapsed < 60
    verdict(7, ok, f"mean {mean_ms:.4f} ms, {below:.2%} below 2 ms, 10000 frames in {elapsed:.1f} s")


if __name__ == "__main__":
    tests = [test_criterion_1_fixed_point_soundness, test_criterion_2_bridge_matches_infer_fixed,
             test_criterion_3_quantization_ordering, test_criterion_4_guard_bits,
             test_criterion_5_reuse_factor_model, test_criterion_6_realtime_service,
             test_criterion_7_latency_distribution, test_criterion_8_throughput_identity]
    for test in tests:
        try:
            test()
        except AssertionError:
            pass
    for n in sorted(VERDICTS):
        print(VERDICTS[n])
    sys.exit(0 if all(" PASS " in v for v in VERDICTS.values()) else 1)
