"""A live node: replay 2 s of frames at 320 fps over UDP and summarize latency.

Run: python3 demos/05_realtime_node.py
"""
import socket
import subprocess
import sys
import time

from blmnode import nn, node, quant
from blmnode import workbench as wb

d = nn.reference_mlp_descriptor()
model = nn.load_weights(wb.synth_weights(3, d, {"dense1": 0.1, "dense2": 0.1}), d)
engine = node.Engine(node.EngineKind.QUANTIZED, model, quant.uniform_plan(d, 16, 7))

# outputs go to a sink socket nobody reads; a real consumer would decode them
sink = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
sink.bind(("127.0.0.1", 0))
svc = node.NodeService(node.NodeConfig(listen_port=0, emit_port=sink.getsockname()[1]), engine).start()
host, port = svc.address
print(f"node listening on {host}:{port}")

# the sender runs in its own process, as a detector front end would
replay = subprocess.run([sys.executable, "-m", "blmnode.cli", "replay", "--fps", "320",
                         "--count", "640", "--target", f"{host}:{port}"],
                        capture_output=True, text=True)
print(replay.stdout.strip())
time.sleep(0.2)
stats = svc.stop()
sink.close()
print(stats.to_text())
print(f"dropped by stage: {svc.dropped_by_stage}")
