"""Transaction-level simulator of the host <-> accelerator memory-mapped path.

One transaction walks the host-visible steps of the central node:

====  ===========================================================
1     host writes 130 32-bit words into the 260 x 16-bit input RAM
2     write-complete notification triggers the IP
3     IP reads the input RAM, computes, (steps 3-5 lumped together)
6     IP fills the 520 x 16-bit output RAM (260 host words)
7     controller interrupts the host (fixed cost + OS jitter)
8     host reads 260 32-bit words back
====  ===========================================================

Packing puts two 16-bit codes in each 32-bit host word, even index in the
low half-word; byte streams are little-endian.
"""
from __future__ import annotations

import csv
import io
import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fxp
from .errors import BadSpec, Busy, ParseError
from .nn import FRAME_LEN, InferenceOutput, _decision, _frame_values, forward_fixed

INPUT_WORDS = FRAME_LEN // 2  # 130
OUTPUT_HALFWORDS = 520
OUTPUT_WORDS = OUTPUT_HALFWORDS // 2  # 260
HOST_PORT_BITS = 32
IP_PORT_BITS = 16


def _require_16(spec: fxp.FixedSpec):
    if spec.total_bits != IP_PORT_BITS:
        raise BadSpec(f"buffers hold {IP_PORT_BITS}-bit codes, got {spec}")


def pack_codes(codes) -> np.ndarray:
    """Pair 16-bit two's-complement codes into 32-bit words (even index low)."""
    c = np.asarray(codes, dtype=np.int64)
    if c.size % 2:
        raise ValueError("need an even number of half-words")
    u = (c & 0xFFFF).astype(np.uint32)
    return u[0::2] | (u[1::2] << np.uint32(16))


def unpack_codes(words) -> np.ndarray:
    w = np.asarray(words, dtype=np.uint32)
    half = np.empty(w.size * 2, dtype=np.uint16)
    half[0::2] = (w & 0xFFFF).astype(np.uint16)
    half[1::2] = (w >> np.uint32(16)).astype(np.uint16)
    return half.view(np.int16).astype(np.int64)


def pack_inputs(values, input_spec: fxp.FixedSpec) -> np.ndarray:
    """Quantize reals to 16-bit codes and pack them two per 32-bit word."""
    _require_16(input_spec)
    codes, _ = fxp.quantize_array(values, input_spec)
    return pack_codes(codes)


def unpack_outputs(words, output_spec: fxp.FixedSpec) -> np.ndarray:
    _require_16(output_spec)
    return fxp.codes_to_real(unpack_codes(words), output_spec)


def words_to_bytes(words) -> bytes:
    return np.asarray(words, dtype="<u4").tobytes()


def bytes_to_words(buf: bytes) -> np.ndarray:
    return np.frombuffer(buf, dtype="<u4").astype(np.uint32)


class BufferModel:
    """The two on-chip RAMs as seen from both ports."""

    def __init__(self):
        self.input_ram = np.zeros(FRAME_LEN, dtype=np.uint16)
        self.output_ram = np.zeros(OUTPUT_HALFWORDS, dtype=np.uint16)

    # host side: 32-bit, word aligned
    def host_write_input(self, words) -> int:
        words = np.asarray(words, dtype=np.uint32)
        if words.size != INPUT_WORDS:
            raise ValueError(f"input RAM takes {INPUT_WORDS} words, got {words.size}")
        self.input_ram[0::2] = (words & 0xFFFF).astype(np.uint16)
        self.input_ram[1::2] = (words >> np.uint32(16)).astype(np.uint16)
        return words.size

    def host_read_output(self) -> np.ndarray:
        return pack_codes(self.output_ram.view(np.int16).astype(np.int64))

    # IP side: 16-bit
    def ip_read_input(self) -> np.ndarray:
        return self.input_ram.view(np.int16).astype(np.int64)

    def ip_write_output(self, codes) -> int:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size != OUTPUT_HALFWORDS:
            raise ValueError(f"output RAM takes {OUTPUT_HALFWORDS} codes, got {codes.size}")
        self.output_ram[:] = (codes & 0xFFFF).astype(np.uint16)
        return codes.size


@dataclass(frozen=True)
class TimingConfig:
    """Per-step costs in nanoseconds.

    The split of the ~0.17 ms non-IP overhead across steps is a tuned guess;
    only the aggregate is meant to be realistic.
    """

    host_write_ns_per_word: float = 20.0
    trigger_ns: float = 1_000.0
    ip_mode: str = "fixed"  # fixed | estimate | measured
    ip_latency_ns: float = 1_570_000.0
    ip_write_ns_per_word: float = 20.0
    interrupt_ns: float = 30_000.0
    jitter_median_ns: float = 120_000.0
    jitter_sigma: float = 0.3
    jitter_max_ns: float = 1_000_000.0
    host_read_ns_per_word: float = 20.0
    clock_hz: float = 100e6  # used by ip_mode="estimate"

    def __post_init__(self):
        if self.ip_mode not in ("fixed", "estimate", "measured"):
            raise ValueError(f"unknown ip_mode {self.ip_mode!r}")

    @classmethod
    def zero(cls, ip_latency_ns: float = 0.0) -> "TimingConfig":
        return cls(host_write_ns_per_word=0, trigger_ns=0, ip_latency_ns=ip_latency_ns,
                   ip_write_ns_per_word=0, interrupt_ns=0, jitter_median_ns=0,
                   host_read_ns_per_word=0)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TimingConfig":
        try:
            return cls(**json.loads(text))
        except (json.JSONDecodeError, TypeError) as e:
            raise ParseError(f"malformed timing config: {e}") from None


@dataclass(frozen=True)
class TraceEvent:
    step: int
    name: str
    t_start_ns: int
    t_end_ns: int
    payload: str = ""

    @property
    def duration_ns(self) -> int:
        return self.t_end_ns - self.t_start_ns


@dataclass
class TransactionTrace:
    events: list = field(default_factory=list)

    @property
    def total_latency_ns(self) -> int:
        return sum(e.duration_ns for e in self.events)

    @property
    def steps(self) -> list[int]:
        return [e.step for e in self.events]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "name", "t_start_ns", "t_end_ns"])
        for e in self.events:
            w.writerow([e.step, e.name, e.t_start_ns, e.t_end_ns])
        return buf.getvalue()


class BridgeSim:
    """Single-outstanding simulator bound to one quantized model.

    Simulated time advances across transactions; the jitter stream is
    deterministic for a given ``seed``.
    """

    def __init__(self, qmodel, timing: TimingConfig | None = None, seed: int = 0,
                 reuse_map=None):
        self.qmodel = qmodel
        self.timing = timing or TimingConfig()
        self.buffers = BufferModel()
        self.now_ns = 0
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        desc = qmodel.descriptor
        self.input_spec = qmodel.plan.spec_for(desc.layers[0].name)
        self.output_spec = qmodel.plan.spec_for(desc.output_layer.name)
        _require_16(self.input_spec)
        _require_16(self.output_spec)
        self._estimated_ip_ns = None
        if self.timing.ip_mode == "estimate":
            from .perf import estimate_model, table3_reuse_map

            est = estimate_model(desc, reuse_map or table3_reuse_map(), qmodel.plan,
                                 self.timing.clock_hz)
            self._estimated_ip_ns = est.latency_s * 1e9

    @property
    def busy(self) -> bool:
        return self._lock.locked()

    def _jitter_ns(self) -> int:
        t = self.timing
        if t.jitter_median_ns <= 0:
            return 0
        draw = self._rng.lognormal(math.log(t.jitter_median_ns), t.jitter_sigma)
        return int(round(min(max(draw, 0.0), t.jitter_max_ns)))

    def run_transaction(self, frame) -> tuple[InferenceOutput, TransactionTrace]:
        if not self._lock.acquire(blocking=False):
            raise Busy("a transaction is already in flight")
        try:
            return self._run(_frame_values(frame))
        finally:
            self._lock.release()

    def _run(self, values: np.ndarray):
        t = self.timing
        trace = TransactionTrace()
        clock = self.now_ns

        def step(num, name, duration, payload=""):
            nonlocal clock
            d = int(round(duration))
            trace.events.append(TraceEvent(num, name, clock, clock + d, payload))
            clock += d

        words = pack_inputs(values, self.input_spec)
        n = self.buffers.host_write_input(words)
        step(1, "host_write", n * t.host_write_ns_per_word, f"{n} words")
        step(2, "trigger", t.trigger_ns)

        start = time.perf_counter_ns()
        x = fxp.codes_to_real(self.buffers.ip_read_input(), self.input_spec)
        codes, out_spec, log = forward_fixed(self.qmodel, x[None, :])
        wall = time.perf_counter_ns() - start
        if t.ip_mode == "fixed":
            ip_ns = t.ip_latency_ns
        elif t.ip_mode == "estimate":
            ip_ns = self._estimated_ip_ns
        else:
            ip_ns = wall
        step(3, "ip_execute", ip_ns, f"overflows={log.total}")

        self.buffers.ip_write_output(codes[0])
        step(6, "output_fill", OUTPUT_WORDS * t.ip_write_ns_per_word, f"{OUTPUT_WORDS} words")
        step(7, "interrupt", t.interrupt_ns + self._jitter_ns())
        out_words = self.buffers.host_read_output()
        step(8, "host_read", out_words.size * t.host_read_ns_per_word, f"{out_words.size} words")
        self.now_ns = clock

        values_out = unpack_outputs(out_words, self.output_spec)
        result = InferenceOutput(values_out, _decision(values_out), overflow=log,
                                 codes=unpack_codes(out_words), spec=self.output_spec)
        return result, trace


def run_transaction(state: BridgeSim, frame) -> tuple[InferenceOutput, TransactionTrace]:
    return state.run_transaction(frame)
