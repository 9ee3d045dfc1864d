"""Reuse factor as the resource/latency knob of the accelerator estimate.

Run: python3 demos/03_reuse_factor.py
"""
from blmnode import nn, perf

dense = perf.dense_geometry(260, 128)
print("Dense 260->128, one multiplier shared rf times:")
for rf in (1, 8, 32, 128, 260):
    e = perf.estimate_layer(dense, rf)
    print(f"  rf={rf:<4} multipliers={e.multipliers:<6} cycles={e.cycles:<4} "
          f"latency={e.latency_s * 1e9:.0f} ns")

unet = nn.reference_unet_descriptor()
for schedule in perf.Schedule:
    est = perf.estimate_model(unet, perf.table3_reuse_map(), clock_hz=100e6, schedule=schedule)
    print()
    print(est.to_text())
    budget = perf.check_budget(est.latency_s, 3e-3)
    print(f"3 ms budget: {'PASS' if budget.passed else 'FAIL'}, slack {budget.slack_s * 1e3:.3f} ms")

print(f"\nthroughput at 1.74 ms per frame: {perf.fps_from_latency(1.74e-3):.1f} fps")
