"""Reuse-factor resource and latency estimator.

A layer's kernel (the per-position dot-product block: ``in*out`` for Dense,
``kernel*in_ch*out_ch`` for Conv1D) is mapped onto ``ceil(kernel_mults / rf)``
multipliers, each reused ``rf`` times. A Conv1D streams its output positions
through that block one after another, so a layer costs
``positions * rf + PIPELINE_FILL`` cycles. Dense on a flat vector has one
position, which reduces to ``rf + PIPELINE_FILL``.

This is a design-space explorer, not a synthesis predictor: the logic-unit
scale in particular is an uncalibrated placeholder.
"""
from __future__ import annotations

import csv
import enum
import fnmatch
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

from .nn import LayerKind, ModelDescriptor

PIPELINE_FILL = 8
LOGIC_UNITS_PER_MULTIPLIER = 64
DEFAULT_CLOCK_HZ = 100e6


class Schedule(enum.Enum):
    SEQUENTIAL = "sequential"
    DATAFLOW = "dataflow"


@dataclass(frozen=True)
class LayerGeometry:
    name: str
    kind: LayerKind
    kernel_mults: int  # multiplications in one kernel invocation
    positions: int  # kernel invocations per forward pass
    params: int

    @property
    def mult_count(self) -> int:
        return self.kernel_mults * self.positions


def geometry(descriptor: ModelDescriptor, name: str) -> LayerGeometry:
    layer = descriptor.layer(name)
    in_shape = descriptor.input_shape_of(layer)
    params = 0
    if name in descriptor.weight_shapes:
        kshape, bshape = descriptor.weight_shapes[name]
        params = math.prod(kshape) + (math.prod(bshape) if bshape is not None else 0)
    if layer.kind is LayerKind.DENSE:
        kshape = descriptor.weight_shapes[name][0]
        positions = math.prod(in_shape[:-1]) if len(in_shape) > 1 else 1
        return LayerGeometry(name, layer.kind, kshape[0] * kshape[1], positions, params)
    if layer.kind is LayerKind.CONV1D:
        k, cin, cout = descriptor.weight_shapes[name][0]
        return LayerGeometry(name, layer.kind, k * cin * cout, in_shape[0], params)
    return LayerGeometry(name, layer.kind, 0, 0, 0)


def dense_geometry(n_in: int, n_out: int, name="dense", use_bias=True) -> LayerGeometry:
    return LayerGeometry(name, LayerKind.DENSE, n_in * n_out, 1,
                         n_in * n_out + (n_out if use_bias else 0))


def conv1d_geometry(length: int, kernel: int, in_ch: int, out_ch: int,
                    name="conv", use_bias=True) -> LayerGeometry:
    return LayerGeometry(name, LayerKind.CONV1D, kernel * in_ch * out_ch, length,
                         kernel * in_ch * out_ch + (out_ch if use_bias else 0))


def mult_count(layer: LayerGeometry) -> int:
    """Multiplications per forward pass (0 for data-movement layers)."""
    return layer.mult_count


@dataclass(frozen=True)
class ReuseMap:
    default_rf: int = 32
    overrides: Mapping = field(default_factory=dict)  # layer name or glob -> rf

    def __post_init__(self):
        for rf in [self.default_rf, *self.overrides.values()]:
            if int(rf) < 1:
                raise ValueError(f"reuse factor must be >= 1, got {rf}")

    def rf_for(self, name: str) -> int:
        if name in self.overrides:
            return int(self.overrides[name])
        for pattern, rf in self.overrides.items():
            if fnmatch.fnmatchcase(name, pattern):
                return int(rf)
        return int(self.default_rf)

    @classmethod
    def parse(cls, default_rf: int, text: str = "") -> "ReuseMap":
        """Parse ``"dense*:260,sigmoid*:260"`` style override lists."""
        overrides = {}
        for item in filter(None, (s.strip() for s in text.split(","))):
            pattern, _, rf = item.rpartition(":")
            if not pattern:
                raise ValueError(f"bad reuse override {item!r}")
            overrides[pattern] = int(rf)
        return cls(int(default_rf), overrides)


def table3_reuse_map() -> ReuseMap:
    """Default reuse 32; dense and sigmoid layers at 260."""
    return ReuseMap(32, {"dense*": 260, "sigmoid*": 260})


@dataclass(frozen=True)
class LayerEstimate:
    name: str
    rf: int  # effective (clamped) reuse factor
    multipliers: int
    logic_units: int
    memory_bits: int
    cycles: int
    latency_s: float


@dataclass(frozen=True)
class ResourceEstimate:
    layers: tuple
    clock_hz: float
    schedule: Schedule
    cycles: int

    @property
    def multipliers(self) -> int:
        return sum(l.multipliers for l in self.layers)

    @property
    def logic_units(self) -> int:
        return sum(l.logic_units for l in self.layers)

    @property
    def memory_bits(self) -> int:
        return sum(l.memory_bits for l in self.layers)

    @property
    def latency_s(self) -> float:
        return self.cycles / self.clock_hz

    @property
    def fps(self) -> float:
        return 1.0 / self.latency_s

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "rf", "multipliers", "logic_units", "memory_bits", "cycles", "latency_s"])
        for l in self.layers:
            w.writerow([l.name, l.rf, l.multipliers, l.logic_units, l.memory_bits, l.cycles,
                        repr(l.latency_s)])
        w.writerow(["TOTAL", "", self.multipliers, self.logic_units, self.memory_bits,
                    self.cycles, repr(self.latency_s)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'layer':<12} {'rf':>5} {'mults':>7} {'logic':>9} {'mem_bits':>10} {'cycles':>8}"
        lines = [head, "-" * len(head)]
        for l in self.layers:
            lines.append(f"{l.name:<12} {l.rf:>5} {l.multipliers:>7} {l.logic_units:>9} "
                         f"{l.memory_bits:>10} {l.cycles:>8}")
        lines.append("-" * len(head))
        lines.append(f"{'total':<12} {'':>5} {self.multipliers:>7} {self.logic_units:>9} "
                     f"{self.memory_bits:>10} {self.cycles:>8}")
        lines.append(f"schedule={self.schedule.value} clock={self.clock_hz:g} Hz "
                     f"latency={self.latency_s * 1e3:.4f} ms ({self.fps:.1f} fps)")
        return "\n".join(lines)


def estimate_layer(layer: LayerGeometry, rf: int, clock_hz: float = DEFAULT_CLOCK_HZ,
                   total_bits: int = 16) -> LayerEstimate:
    if rf < 1:
        raise ValueError("reuse factor must be >= 1")
    if layer.kernel_mults == 0:
        return LayerEstimate(layer.name, int(rf), 0, 0, 0, PIPELINE_FILL, PIPELINE_FILL / clock_hz)
    rf_eff = min(int(rf), layer.kernel_mults)  # no more reuse than there is work
    mults = -(-layer.kernel_mults // rf_eff)
    cycles = layer.positions * rf_eff + PIPELINE_FILL
    return LayerEstimate(layer.name, rf_eff, mults, mults * LOGIC_UNITS_PER_MULTIPLIER,
                         layer.params * total_bits, cycles, cycles / clock_hz)


def estimate_model(descriptor: ModelDescriptor, reuse_map: ReuseMap, plan=None,
                   clock_hz: float = DEFAULT_CLOCK_HZ,
                   schedule: Schedule = Schedule.SEQUENTIAL) -> ResourceEstimate:
    """Per-layer and total estimate. ``plan`` supplies per-layer widths (16 if omitted)."""
    if hasattr(descriptor, "descriptor"):  # accept a Model
        descriptor = descriptor.descriptor
    rows = []
    for name in descriptor.layer_names:
        bits = plan.spec_for(name).total_bits if plan is not None else 16
        rows.append(estimate_layer(geometry(descriptor, name), reuse_map.rf_for(name),
                                   clock_hz, bits))
    schedule = Schedule(schedule)
    if schedule is Schedule.SEQUENTIAL:
        cycles = sum(r.cycles for r in rows)
    else:
        # layers stream concurrently: the slowest body dominates, fills add up
        cycles = max(r.cycles - PIPELINE_FILL for r in rows) + PIPELINE_FILL * len(rows)
    return ResourceEstimate(tuple(rows), float(clock_hz), schedule, int(cycles))


@dataclass(frozen=True)
class BudgetReport:
    passed: bool
    latency_s: float
    deadline_s: float
    slack_s: float


def check_budget(estimate, deadline_seconds: float) -> BudgetReport:
    """Pass iff latency <= deadline (inclusive). Accepts an estimate or seconds."""
    if deadline_seconds <= 0:
        raise ValueError("deadline must be positive")
    latency = estimate.latency_s if hasattr(estimate, "latency_s") else float(estimate)
    return BudgetReport(latency <= deadline_seconds, latency, deadline_seconds,
                        deadline_seconds - latency)


def fps_from_latency(latency_s: float) -> float:
    return 1.0 / latency_s
