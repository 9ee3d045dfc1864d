"""The host-accelerator bridge: packing, one traced transaction, and the
latency distribution of the default timing model.

Run: python3 demos/04_bridge_latency.py
"""
import numpy as np

from blmnode import bridge, fxp, nn, quant
from blmnode import workbench as wb

spec = fxp.make_spec(16, 7)
words = bridge.pack_inputs([1.0, -1.0], spec)
print(f"[1.0, -1.0] packs into {words[0]:#010x}, bytes {bridge.words_to_bytes(words).hex(' ')}")

d = nn.reference_mlp_descriptor()
model = nn.load_weights(wb.synth_weights(3, d, {"dense1": 0.1, "dense2": 0.1}), d)
sim = bridge.BridgeSim(quant.quantize_model(model, quant.uniform_plan(d, 16, 7)), seed=1)

out, trace = sim.run_transaction(wb.synth_frames(1, 1)[0])
print("\none transaction:")
print(trace.to_csv())
print(f"decision {out.decision.name}, total {trace.total_latency_ns / 1e6:.4f} ms")

lat = np.array([sim.run_transaction(f)[1].total_latency_ns for f in wb.synth_frames(2, 5000)]) / 1e6
print(f"\n5000 transactions: mean {lat.mean():.4f} ms, p99 {np.percentile(lat, 99):.4f} ms, "
      f"{np.mean(lat < 2):.2%} below 2 ms")
counts, edges = np.histogram(lat, bins=np.arange(1.55, 2.05, 0.05))
for c, e in zip(counts, edges):
    print(f"  {e:.2f} ms {'#' * int(60 * c / counts.max())}")
