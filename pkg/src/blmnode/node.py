"""UDP frame service: receive -> infer -> emit, with latency accounting.

Wire formats (little-endian)::

    input   "BLM1" | seq u32 | send_timestamp_ns u64 | 260 x f32        1056 bytes
    output  "DBL1" | seq u32 | 520 x f32 | decision u8 | latency_ns u32  2093 bytes

The three stages run on their own threads and hand frames over through
bounded drop-oldest queues. The deadline is measured and reported, never
enforced by cancelling work.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .decision import OUTPUT_LEN, Source, decide_source
from .errors import BindError, ModelLoadError, ParseError
from .nn import FRAME_LEN, Frame, infer_fixed, infer_fixed_batch, infer_float, infer_float_batch

log = logging.getLogger(__name__)

IN_MAGIC = b"BLM1"
OUT_MAGIC = b"DBL1"
_IN = struct.Struct(f"<4sIQ{FRAME_LEN}f")
_OUT = struct.Struct(f"<4sI{OUTPUT_LEN}fBI")
IN_SIZE = _IN.size  # 1056
OUT_SIZE = _OUT.size  # 2093
DEFAULT_DEADLINE_NS = 3_000_000
HIST_BIN_NS = 50_000


class MalformedDatagram(ValueError):
    pass


def encode_frame(seq: int, values, send_timestamp_ns: int = 0) -> bytes:
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (FRAME_LEN,):
        raise ValueError(f"frame must hold {FRAME_LEN} values")
    return _IN.pack(IN_MAGIC, seq & 0xFFFFFFFF, send_timestamp_ns & (2 ** 64 - 1), *v.tolist())


def decode_frame(data: bytes) -> tuple[int, int, np.ndarray]:
    """Return ``(seq, send_timestamp_ns, values)``; raises :class:`MalformedDatagram`."""
    if len(data) != IN_SIZE:
        raise MalformedDatagram(f"expected {IN_SIZE} bytes, got {len(data)}")
    magic, seq, ts, *values = _IN.unpack(data)
    if magic != IN_MAGIC:
        raise MalformedDatagram(f"bad magic {magic!r}")
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise MalformedDatagram("non-finite sensor value")
    return seq, ts, arr


def encode_output(seq: int, values, decision: Source, latency_ns: int) -> bytes:
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (OUTPUT_LEN,):
        raise ValueError(f"output must hold {OUTPUT_LEN} values")
    lat = min(max(int(latency_ns), 0), 0xFFFFFFFF)
    return _OUT.pack(OUT_MAGIC, seq & 0xFFFFFFFF, *v.tolist(), int(decision), lat)


def decode_output(data: bytes) -> tuple[int, np.ndarray, Source, int]:
    if len(data) != OUT_SIZE:
        raise MalformedDatagram(f"expected {OUT_SIZE} bytes, got {len(data)}")
    magic, seq, *rest = _OUT.unpack(data)
    if magic != OUT_MAGIC:
        raise MalformedDatagram(f"bad magic {magic!r}")
    values = np.asarray(rest[:OUTPUT_LEN], dtype=np.float64)
    return seq, values, Source(rest[OUTPUT_LEN]), rest[OUTPUT_LEN + 1]


# ---------------------------------------------------------------------------
# configuration and engines

class EngineKind(enum.Enum):
    FLOAT_ORACLE = "FloatOracle"
    QUANTIZED = "Quantized"
    BRIDGE_SIM = "BridgeSim"


@dataclass
class NodeConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 9260
    emit_host: str = "127.0.0.1"
    emit_port: int = 9520
    deadline_ns: int = DEFAULT_DEADLINE_NS
    engine: EngineKind = EngineKind.QUANTIZED
    model_path: str | None = None  # descriptor JSON
    weights_path: str | None = None
    plan_path: str | None = None
    timing_path: str | None = None
    standardization: dict | None = None  # {"mean": .., "std": ..}
    queue_capacity: int = 4
    drop_policy: str = "DropOldest"
    records_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        self.engine = EngineKind(self.engine)
        if self.deadline_ns <= 0:
            raise ValueError("deadline must be positive")
        if self.queue_capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        if self.drop_policy != "DropOldest":
            raise ValueError(f"unsupported drop policy {self.drop_policy!r}")

    def to_json(self) -> str:
        d = asdict(self)
        d["engine"] = self.engine.value
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NodeConfig":
        try:
            return cls(**json.loads(text))
        except (json.JSONDecodeError, TypeError, ValueError) as e:
            raise ParseError(f"malformed node config: {e}") from None


class Engine:
    """Callable ``values -> (InferenceOutput, engine_latency_ns)``."""

    def __init__(self, kind: EngineKind, model, plan=None, timing=None, seed: int = 0):
        self.kind = EngineKind(kind)
        self._bridge = None
        self._qmodel = None
        if self.kind is EngineKind.FLOAT_ORACLE:
            self._model = model
        else:
            from .quant import QuantizedModel, quantize_model

            self._qmodel = model if isinstance(model, QuantizedModel) else quantize_model(model, plan)
            if self.kind is EngineKind.BRIDGE_SIM:
                from .bridge import BridgeSim

                self._bridge = BridgeSim(self._qmodel, timing, seed=seed)

    def __call__(self, values):
        if self.kind is EngineKind.BRIDGE_SIM:
            out, trace = self._bridge.run_transaction(values)
            return out, trace.total_latency_ns
        start = time.perf_counter_ns()
        if self.kind is EngineKind.FLOAT_ORACLE:
            out = infer_float(self._model, values)
        else:
            out = infer_fixed(self._qmodel, values)
        return out, time.perf_counter_ns() - start

    def run_batch(self, batch) -> tuple[np.ndarray, int]:
        """Output values ``(B, 520)`` for a stack of frames, plus elapsed ns.

        Used by the node to catch up after a stall. The bridge simulator stays
        single-outstanding, so its frames go through one at a time and the
        elapsed time is the sum of the simulated transaction latencies.
        """
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, FRAME_LEN)
        if self.kind is EngineKind.BRIDGE_SIM:
            rows, total = [], 0
            for frame in batch:
                out, ns = self(frame)
                rows.append(out.values)
                total += ns
            return np.stack(rows), total
        start = time.perf_counter_ns()
        if self.kind is EngineKind.FLOAT_ORACLE:
            values = infer_float_batch(self._model, batch)
        else:
            values, _ = infer_fixed_batch(self._qmodel, batch)
        return values.reshape(batch.shape[0], -1), time.perf_counter_ns() - start


def load_engine(config: NodeConfig) -> Engine:
    """Build the configured engine from files; any failure is a ModelLoadError."""
    from .bridge import TimingConfig
    from .nn import load_descriptor, read_weight_file
    from .quant import PrecisionPlan

    try:
        with open(config.model_path) as f:
            desc = load_descriptor(f.read())
        model = read_weight_file(config.weights_path, desc)
        plan = None
        if config.engine is not EngineKind.FLOAT_ORACLE:
            with open(config.plan_path) as f:
                plan = PrecisionPlan.from_json(f.read())
        timing = None
        if config.timing_path:
            with open(config.timing_path) as f:
                timing = TimingConfig.from_json(f.read())
        return Engine(config.engine, model, plan, timing, seed=config.seed)
    except Exception as e:  # noqa: BLE001 - startup failures are reported uniformly
        raise ModelLoadError(f"cannot load engine: {e}") from e


# ---------------------------------------------------------------------------
# queues, records, stats

class DropOldestQueue:
    """Bounded FIFO; a put into a full queue evicts the oldest item."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False

    def put(self, item):
        """Enqueue; returns the evicted item or None."""
        with self._cond:
            evicted = None
            if len(self._items) >= self.capacity:
                evicted = self._items.popleft()
            self._items.append(item)
            self._cond.notify()
            return evicted

    def get(self, timeout: float | None = None):
        """Next item, or None once closed and drained (or on timeout)."""
        with self._cond:
            end = None if timeout is None else time.monotonic() + timeout
            while not self._items:
                if self._closed:
                    return None
                remaining = None if end is None else end - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)
            return self._items.popleft()

    def get_all(self, timeout: float | None = None) -> list:
        """Everything queued (oldest first), waiting for at least one item.

        Returns an empty list once closed and drained (or on timeout).
        """
        first = self.get(timeout)
        if first is None:
            return []
        with self._cond:
            rest = list(self._items)
            self._items.clear()
        return [first, *rest]

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def __len__(self):
        return len(self._items)


@dataclass(frozen=True)
class LatencyRecord:
    seq: int
    latency_ns: int  # ingress -> egress
    deadline_met: bool
    engine_latency_ns: int
    ingress_ns: int = 0
    egress_ns: int = 0
    decision: int = 0


RECORD_FIELDS = ["seq", "latency_ns", "deadline_met", "engine_latency_ns", "ingress_ns",
                 "egress_ns", "decision"]


def write_records_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.seq, r.latency_ns, int(r.deadline_met), r.engine_latency_ns,
                        r.ingress_ns, r.egress_ns, r.decision])


def read_records_csv(path) -> list[LatencyRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [LatencyRecord(int(r["seq"]), int(r["latency_ns"]), bool(int(r["deadline_met"])),
                          int(r["engine_latency_ns"]), int(r.get("ingress_ns") or 0),
                          int(r.get("egress_ns") or 0), int(r.get("decision") or 0))
            for r in rows]


@dataclass(frozen=True)
class RunStats:
    frames: int
    dropped: int
    malformed: int
    received: int
    mean_ns: float
    min_ns: int
    max_ns: int
    p50_ns: int
    p99_ns: int
    deadline_ns: int
    deadline_misses: int
    achieved_fps: float
    hist_bin_ns: int
    hist_start_ns: int
    hist_counts: tuple

    @property
    def hist_edges_ns(self) -> list[int]:
        return [self.hist_start_ns + i * self.hist_bin_ns for i in range(len(self.hist_counts) + 1)]

    @property
    def mode_ns(self) -> float:
        """Centre of the most populated histogram bin."""
        i = int(np.argmax(self.hist_counts))
        return self.hist_start_ns + (i + 0.5) * self.hist_bin_ns

    def to_text(self) -> str:
        ms = 1e-6
        lines = [
            f"frames processed   {self.frames}",
            f"received           {self.received} (dropped {self.dropped}, malformed {self.malformed})",
            f"latency mean       {self.mean_ns * ms:.4f} ms",
            f"latency min/max    {self.min_ns * ms:.4f} / {self.max_ns * ms:.4f} ms",
            f"latency p50/p99    {self.p50_ns * ms:.4f} / {self.p99_ns * ms:.4f} ms",
            f"deadline           {self.deadline_ns * ms:.3f} ms, misses {self.deadline_misses}",
            f"achieved fps       {self.achieved_fps:.2f}",
        ]
        return "\n".join(lines)


def nearest_rank(sorted_values, pct: float):
    """Nearest-rank percentile of an ascending sequence."""
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[min(rank, n) - 1]


def fraction_below(records, threshold_ns: float, use_engine_latency: bool = False) -> float:
    lat = [r.engine_latency_ns if use_engine_latency else r.latency_ns for r in records]
    return float(np.mean(np.asarray(lat) < threshold_ns))


def stats_report(records, deadline_ns: int = DEFAULT_DEADLINE_NS, dropped: int = 0,
                 malformed: int = 0, use_engine_latency: bool = False,
                 bin_ns: int = HIST_BIN_NS) -> RunStats:
    """Order statistics, 50 us histogram and deadline misses over the records.

    ``use_engine_latency`` summarizes the engine's (possibly simulated)
    latency instead of the ingress-to-egress wall time.
    """
    records = list(records)
    if not records:
        raise ValueError("stats_report needs at least one record")
    lat = np.array([r.engine_latency_ns if use_engine_latency else r.latency_ns
                    for r in records], dtype=np.int64)
    s = np.sort(lat)
    bins = s // bin_ns
    start = int(bins[0])
    counts = np.bincount(bins - start)
    misses = int(np.count_nonzero(lat > deadline_ns))
    fps = 0.0
    ingress = [r.ingress_ns for r in records]
    egress = [r.egress_ns for r in records]
    span = max(egress) - min(ingress)
    if span > 0:
        fps = len(records) / (span * 1e-9)
    return RunStats(
        frames=len(records), dropped=dropped, malformed=malformed,
        received=len(records) + dropped + malformed,
        mean_ns=float(lat.mean()), min_ns=int(s[0]), max_ns=int(s[-1]),
        p50_ns=int(nearest_rank(s, 50)), p99_ns=int(nearest_rank(s, 99)),
        deadline_ns=int(deadline_ns), deadline_misses=misses, achieved_fps=fps,
        hist_bin_ns=int(bin_ns), hist_start_ns=start * int(bin_ns),
        hist_counts=tuple(int(c) for c in counts),
    )


# ---------------------------------------------------------------------------
# the service

@dataclass
class _Item:
    seq: int
    ingress_ns: int
    values: np.ndarray
    output: object = None
    engine_ns: int = 0


class NodeService:
    """Three-stage pipeline bound to a UDP socket."""

    def __init__(self, config: NodeConfig, engine: Engine | None = None):
        self.config = config
        self.engine = engine if engine is not None else load_engine(config)
        self._std = None
        if config.standardization:
            from .workbench import StandardizationParams

            self._std = StandardizationParams(**config.standardization)
        try:
            self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)
            self.sock.bind((config.listen_host, config.listen_port))
        except OSError as e:
            raise BindError(f"cannot bind {config.listen_host}:{config.listen_port}: {e}") from e
        self.sock.settimeout(0.05)
        self.out_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.emit_addr = (config.emit_host, config.emit_port)
        self._infer_q = DropOldestQueue(config.queue_capacity)
        self._emit_q = DropOldestQueue(config.queue_capacity)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._lock = threading.Lock()
        self.received = 0
        self.dropped = 0
        self.dropped_by_stage = {"infer": 0, "emit": 0}
        self.malformed = 0
        self.records: list[LatencyRecord] = []
        self.processed_seqs: list[int] = []

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def start(self) -> "NodeService":
        for target, name in ((self._receive_loop, "rx"), (self._infer_loop, "infer"),
                             (self._emit_loop, "tx")):
            t = threading.Thread(target=target, name=f"node-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self, timeout: float = 5.0) -> RunStats | None:
        """Stop receiving, drain both queues, and return the run statistics."""
        self._stop.set()
        for t in self._threads:
            t.join(timeout)
        self.sock.close()
        self.out_sock.close()
        if self.config.records_path and self.records:
            write_records_csv(self.config.records_path, self.records)
        return self.stats() if self.records else None

    def stats(self) -> RunStats:
        return stats_report(self.records, self.config.deadline_ns, self.dropped, self.malformed)

    def _count_drop(self, evicted, stage: str = "infer"):
        if evicted is not None:
            with self._lock:
                self.dropped += 1
                self.dropped_by_stage[stage] += 1

    def _receive_loop(self):
        while not self._stop.is_set():
            try:
                data, _ = self.sock.recvfrom(4096)
            except socket.timeout:
                continue
            except OSError:
                break
            now = time.perf_counter_ns()
            with self._lock:
                self.received += 1
            try:
                seq, _, values = decode_frame(data)
            except MalformedDatagram as e:
                log.debug("malformed datagram: %s", e)
                with self._lock:
                    self.malformed += 1
                continue
            self._count_drop(self._infer_q.put(_Item(seq, now, values)))
        self._infer_q.close()

    def _infer_loop(self):
        # A backlog (after a host stall) is inferred as one batch, which costs
        # far less per frame than running the frames one by one.
        while True:
            items = self._infer_q.get_all()
            if not items:
                break
            batch = np.stack([it.values for it in items])
            if self._std is not None:
                from .workbench import standardize

                batch = standardize(batch, self._std)
            values, engine_ns = self.engine.run_batch(batch)
            for item, row in zip(items, values):
                item.output, item.engine_ns = row, engine_ns
                self._count_drop(self._emit_q.put(item), "emit")
        self._emit_q.close()

    def _emit_loop(self):
        deadline = self.config.deadline_ns
        while True:
            item = self._emit_q.get()
            if item is None:
                break
            values = item.output
            decision = decide_source(values)
            payload = encode_output(item.seq, values, decision,
                                    time.perf_counter_ns() - item.ingress_ns)
            try:
                self.out_sock.sendto(payload, self.emit_addr)
            except OSError as e:
                log.warning("emit failed: %s", e)
            egress = time.perf_counter_ns()
            latency = egress - item.ingress_ns
            self.records.append(LatencyRecord(item.seq, latency, latency <= deadline,
                                              int(item.engine_ns), item.ingress_ns, egress,
                                              int(decision)))
            self.processed_seqs.append(item.seq)


def serve(config: NodeConfig, stop_event: threading.Event | None = None,
          engine: Engine | None = None, ready=None) -> RunStats | None:
    """Run the node until ``stop_event`` is set (or KeyboardInterrupt)."""
    service = NodeService(config, engine).start()
    if ready is not None:
        ready(service)
    stop_event = stop_event or threading.Event()
    try:
        while not stop_event.wait(0.1):
            pass
    except KeyboardInterrupt:
        pass
    return service.stop()


# ---------------------------------------------------------------------------
# replay

@dataclass(frozen=True)
class ReplayReport:
    sent: int
    nominal_fps: float
    duration_s: float
    achieved_fps: float
    rate_error: float  # relative, achieved vs nominal


def replay(target: tuple[str, int], fps: float, count: int, seed: int | None = 7,
           frames=None, standardized: bool = True) -> ReplayReport:
    """Send ``count`` frames at a fixed ``1/fps`` cadence.

    Frames come from ``frames`` (cycled) or are synthesized from ``seed``.
    Send times follow an absolute schedule so per-send jitter does not
    accumulate into rate drift.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    if count < 1:
        raise ValueError("count must be >= 1")
    if frames is None:
        from .workbench import FrameMode, synth_frames

        mode = FrameMode.STANDARDIZED if standardized else FrameMode.RAW
        frames = synth_frames(seed if seed is not None else 0, min(count, 1000), mode)
    frames = np.asarray(frames, dtype=np.float64).reshape(-1, FRAME_LEN)
    payload_cache = [frames[i] for i in range(frames.shape[0])]
    interval = 1e9 / fps
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        t0 = time.perf_counter_ns()
        first = last = t0
        for i in range(count):
            due = t0 + int(round(i * interval))
            while True:
                now = time.perf_counter_ns()
                wait = due - now
                if wait <= 0:
                    break
                # plain sleeps: a spinning sender starves the node on small hosts
                time.sleep(wait * 1e-9)
            stamp = time.perf_counter_ns()
            sock.sendto(encode_frame(i, payload_cache[i % len(payload_cache)], stamp), target)
            if i == 0:
                first = stamp
            last = time.perf_counter_ns()
    finally:
        sock.close()
    # the last frame occupies one full interval of the schedule
    duration = (last - first) * 1e-9 + 1.0 / fps
    achieved = count / duration
    return ReplayReport(count, float(fps), duration, achieved, achieved / fps - 1.0)
