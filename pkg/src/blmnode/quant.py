"""Post-training calibration and per-layer precision planning."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import fxp
from .errors import EmptyCalibrationSet, ParseError, PlanMismatch
from .nn import Model, ModelDescriptor, forward_float


@dataclass(frozen=True)
class CalibrationProfile:
    max_abs: Mapping  # layer name -> max |output| over the calibration set
    sample_count: int

    def merge(self, other: "CalibrationProfile") -> "CalibrationProfile":
        """Combine two partial profiles (associative and commutative)."""
        keys = list(self.max_abs) + [k for k in other.max_abs if k not in self.max_abs]
        merged = {k: max(self.max_abs.get(k, 0.0), other.max_abs.get(k, 0.0)) for k in keys}
        return CalibrationProfile(merged, self.sample_count + other.sample_count)

    def to_json(self) -> str:
        return json.dumps({"format": 1, "sample_count": self.sample_count,
                           "max_abs": dict(self.max_abs)}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationProfile":
        try:
            doc = json.loads(text)
            return cls({str(k): float(v) for k, v in doc["max_abs"].items()},
                       int(doc["sample_count"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"malformed profile: {e!r}") from None


def profile(model: Model, calibration_frames, batch_size: int = 256,
            percentile: float | None = None) -> CalibrationProfile:
    """Record each layer's maximum absolute output over the calibration frames.

    ``percentile`` switches to a per-layer percentile of |output| instead of
    the true maximum (an extension; off by default). Percentile mode needs
    all activations at once, so it ignores ``batch_size``.
    """
    frames = np.asarray(calibration_frames, dtype=np.float64)
    frames = frames.reshape((-1,) + model.descriptor.input_shape)
    if frames.shape[0] == 0:
        raise EmptyCalibrationSet("calibration needs at least one frame")

    if percentile is not None:
        stats = {}

        def keep(name, y):
            stats[name] = float(np.percentile(np.abs(y), percentile))

        forward_float(model, frames, observe=keep)
        return CalibrationProfile(stats, frames.shape[0])

    result = CalibrationProfile({name: 0.0 for name in model.descriptor.layer_names}, 0)
    for start in range(0, frames.shape[0], batch_size):
        chunk = frames[start:start + batch_size]
        part = {}

        def observe(name, y):
            part[name] = float(np.max(np.abs(y))) if y.size else 0.0

        forward_float(model, chunk, observe=observe)
        result = result.merge(CalibrationProfile(part, chunk.shape[0]))
    return result


class Strategy(enum.Enum):
    UNIFORM = "uniform"
    LAYER_BASED = "layer_based"


@dataclass(frozen=True)
class PrecisionPlan:
    specs: Mapping  # layer name -> FixedSpec
    strategy: Strategy
    guard_bits: int = 0

    def __post_init__(self):
        object.__setattr__(self, "specs", MappingProxyType(dict(self.specs)))

    def spec_for(self, layer: str) -> fxp.FixedSpec:
        try:
            return self.specs[layer]
        except KeyError:
            raise PlanMismatch(layer) from None

    def check_covers(self, descriptor: ModelDescriptor) -> None:
        for name in descriptor.layer_names:
            if name not in self.specs:
                raise PlanMismatch(name)

    def __eq__(self, other):
        if not isinstance(other, PrecisionPlan):
            return NotImplemented
        return (dict(self.specs) == dict(other.specs) and self.strategy == other.strategy
                and self.guard_bits == other.guard_bits)

    def __hash__(self):
        return hash((tuple(sorted(self.specs.items(), key=lambda kv: kv[0])),
                     self.strategy, self.guard_bits))

    @property
    def total_bits(self) -> int:
        return max(s.total_bits for s in self.specs.values())

    def describe(self) -> str:
        if self.strategy is Strategy.UNIFORM:
            return str(next(iter(self.specs.values())))
        return f"fx<{self.total_bits},x>"

    def to_json(self) -> str:
        rows = [{"layer": name, "W": s.total_bits, "I": s.integer_bits,
                 "rounding": s.rounding.value, "overflow": s.overflow.value}
                for name, s in self.specs.items()]
        return json.dumps({"format": 1, "strategy": self.strategy.value,
                           "guard_bits": self.guard_bits, "layers": rows}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PrecisionPlan":
        try:
            doc = json.loads(text)
            specs = {r["layer"]: fxp.make_spec(int(r["W"]), int(r["I"]),
                                               fxp.Rounding(r.get("rounding", "nearest_even")),
                                               fxp.Overflow(r.get("overflow", "saturate")))
                     for r in doc["layers"]}
            return cls(specs, Strategy(doc.get("strategy", "layer_based")),
                       int(doc.get("guard_bits", 0)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ParseError(f"malformed plan: {e!r}") from None


def integer_bits_for(max_abs: float, total_bits: int = 16, guard_bits: int = 0) -> int:
    """Smallest I (sign included) with ``max_abs < 2**(I-1)``, plus guard bits."""
    if max_abs <= 0:
        return 1
    _, exp = math.frexp(max_abs)  # max_abs = m * 2**exp, 0.5 <= m < 1
    floor_log2 = exp - 1
    return min(max(floor_log2 + 2 + guard_bits, 1), total_bits)


def plan_precision(profile: CalibrationProfile, total_bits: int = 16, guard_bits: int = 0,
                   rounding=fxp.Rounding.NEAREST_EVEN,
                   overflow=fxp.Overflow.SATURATE) -> PrecisionPlan:
    if guard_bits < 0:
        raise ValueError("guard_bits must be >= 0")
    specs = {name: fxp.make_spec(total_bits, integer_bits_for(m, total_bits, guard_bits),
                                 rounding, overflow)
             for name, m in profile.max_abs.items()}
    return PrecisionPlan(specs, Strategy.LAYER_BASED, guard_bits)


def uniform_plan(descriptor: ModelDescriptor, total_bits: int, integer_bits: int,
                 rounding=fxp.Rounding.NEAREST_EVEN,
                 overflow=fxp.Overflow.SATURATE) -> PrecisionPlan:
    spec = fxp.make_spec(total_bits, integer_bits, rounding, overflow)
    return PrecisionPlan({name: spec for name in descriptor.layer_names}, Strategy.UNIFORM)


@dataclass(frozen=True)
class QuantizedModel:
    descriptor: ModelDescriptor
    plan: PrecisionPlan
    codes: Mapping  # layer name -> (kernel codes, bias codes or None)
    saturated_weights: Mapping = field(default_factory=dict)  # layer name -> count
    _matrices: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def kernel_matrix(self, name: str, as_float: bool = False) -> np.ndarray:
        """Kernel codes as a ``(fan_in, out)`` matrix, cached per layer."""
        key = (name, as_float)
        m = self._matrices.get(key)
        if m is None:
            k = self.codes[name][0]
            m = k.reshape(-1, k.shape[-1])
            if as_float:
                m = m.astype(np.float64)
            self._matrices[key] = m
        return m

    @property
    def total_saturated(self) -> int:
        return sum(self.saturated_weights.values())

    def dequantized(self) -> Model:
        """Float model holding the on-grid weights."""
        weights = {}
        for name, (k, b) in self.codes.items():
            spec = self.plan.spec_for(name)
            weights[name] = (fxp.codes_to_real(k, spec),
                             None if b is None else fxp.codes_to_real(b, spec))
        return Model(self.descriptor, weights)


def quantize_model(model: Model, plan: PrecisionPlan) -> QuantizedModel:
    """Quantize every weight and bias to its layer's spec."""
    desc = model.descriptor
    plan.check_covers(desc)
    codes, saturated = {}, {}
    for name, (k, b) in model.weights.items():
        spec = plan.spec_for(name)
        kc, ko = fxp.quantize_array(k, spec)
        n = int(ko.sum())
        bc = None
        if b is not None:
            bc, bo = fxp.quantize_array(b, spec)
            n += int(bo.sum())
        codes[name] = (kc, bc)
        saturated[name] = n
    return QuantizedModel(desc, plan, codes, saturated)
