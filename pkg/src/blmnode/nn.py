"""Layer-graph network engine: descriptors, weights, float and fixed-point paths.

Tensors are laid out ``(length, channels)`` (or ``(features,)`` after a
Flatten). Internally every forward pass carries a leading batch axis so the
evaluation code can push many frames through at once; the public
``infer_*`` functions take one frame, matching the batch-size-1 regime of the
deployed node.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import fxp
from .decision import OUTPUT_LEN, Source, decide_source
from .errors import NonFinite, ParseError, PlanMismatch, ShapeError, SizeMismatch

FORMAT_VERSION = 1
FRAME_LEN = 260
INPUT_NAME = "input"


class LayerKind(enum.Enum):
    DENSE = "Dense"
    CONV1D = "Conv1D"
    MAXPOOL1D = "MaxPool1D"
    UPSAMPLE1D = "UpSample1D"
    CONCATENATE = "Concatenate"
    RELU = "ReLU"
    SIGMOID = "Sigmoid"
    FLATTEN = "Flatten"


ARITHMETIC_KINDS = (LayerKind.DENSE, LayerKind.CONV1D)


@dataclass(frozen=True)
class LayerDescriptor:
    name: str
    kind: LayerKind
    params: Mapping = field(default_factory=dict)
    inputs: tuple = ()

    @property
    def has_weights(self) -> bool:
        return self.kind in ARITHMETIC_KINDS

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind.value,
                "params": dict(self.params), "inputs": list(self.inputs)}


@dataclass(frozen=True)
class ModelDescriptor:
    """Validated layer graph. Build with :func:`build_descriptor` or :func:`load_descriptor`."""

    name: str
    input_shape: tuple
    layers: tuple
    shapes: Mapping  # layer name -> output shape (no batch axis)
    weight_shapes: Mapping  # layer name -> (kernel shape, bias shape or None)
    param_count: int

    def layer(self, name: str) -> LayerDescriptor:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    @property
    def output_layer(self) -> LayerDescriptor:
        return self.layers[-1]

    @property
    def output_shape(self) -> tuple:
        return self.shapes[self.output_layer.name]

    def input_shape_of(self, layer: LayerDescriptor) -> tuple:
        src = layer.inputs[0]
        return self.input_shape if src == INPUT_NAME else self.shapes[src]

    def to_dict(self) -> dict:
        return {"format": FORMAT_VERSION, "name": self.name,
                "input_shape": list(self.input_shape),
                "param_count": self.param_count,
                "layers": [l.to_dict() for l in self.layers]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _layer_param_count(kernel_shape, bias_shape) -> int:
    n = int(np.prod(kernel_shape))
    if bias_shape is not None:
        n += int(np.prod(bias_shape))
    return n


def _infer_shape(layer: LayerDescriptor, in_shapes: list[tuple]):
    """Return (output shape, kernel shape, bias shape) for one layer."""
    kind, p = layer.kind, layer.params
    if kind is LayerKind.CONCATENATE:
        if len(in_shapes) < 2:
            raise ShapeError(layer.name, "Concatenate needs at least two inputs")
        if any(len(s) != 2 for s in in_shapes):
            raise ShapeError(layer.name, "Concatenate inputs must be (length, channels)")
        lengths = {s[0] for s in in_shapes}
        if len(lengths) != 1:
            raise ShapeError(layer.name, f"length mismatch in Concatenate: {in_shapes}")
        return (in_shapes[0][0], sum(s[1] for s in in_shapes)), None, None
    if len(in_shapes) != 1:
        raise ShapeError(layer.name, f"{kind.value} takes exactly one input")
    (shape,) = in_shapes
    if kind is LayerKind.DENSE:
        units = int(p["units"])
        if units < 1:
            raise ShapeError(layer.name, "units must be positive")
        out = shape[:-1] + (units,)
        bias = (units,) if p.get("use_bias", True) else None
        return out, (shape[-1], units), bias
    if kind is LayerKind.CONV1D:
        if len(shape) != 2:
            raise ShapeError(layer.name, f"Conv1D needs (length, channels) input, got {shape}")
        filters, k = int(p["filters"]), int(p["kernel_size"])
        if p.get("padding", "same") != "same":
            raise ShapeError(layer.name, "only padding='same' is supported")
        if filters < 1 or k < 1:
            raise ShapeError(layer.name, "filters and kernel_size must be positive")
        bias = (filters,) if p.get("use_bias", True) else None
        return (shape[0], filters), (k, shape[1], filters), bias
    if kind in (LayerKind.MAXPOOL1D, LayerKind.UPSAMPLE1D):
        if len(shape) != 2:
            raise ShapeError(layer.name, f"{kind.value} needs (length, channels) input")
        f = int(p.get("factor", 2))
        if f < 1:
            raise ShapeError(layer.name, "factor must be positive")
        length = shape[0] // f if kind is LayerKind.MAXPOOL1D else shape[0] * f
        if length < 1:
            raise ShapeError(layer.name, "pooling produces an empty tensor")
        return (length, shape[1]), None, None
    if kind in (LayerKind.RELU, LayerKind.SIGMOID):
        return shape, None, None
    if kind is LayerKind.FLATTEN:
        return (int(np.prod(shape)),), None, None
    raise ShapeError(layer.name, f"unsupported kind {kind}")


def build_descriptor(layers: Sequence[LayerDescriptor], input_shape=(FRAME_LEN, 1),
                     name="model", declared_params=None, io_contract=False) -> ModelDescriptor:
    """Validate a layer list (topologically ordered) and propagate shapes.

    With ``io_contract`` the graph must map a (260, 1) frame to 520 outputs.
    """
    input_shape = tuple(int(d) for d in input_shape)
    shapes: dict[str, tuple] = {}
    weight_shapes: dict[str, tuple] = {}
    total = 0
    if not layers:
        raise ShapeError(name, "descriptor has no layers")
    for layer in layers:
        if layer.name in shapes or layer.name == INPUT_NAME:
            raise ShapeError(layer.name, "duplicate layer name")
        if not layer.inputs:
            raise ShapeError(layer.name, "layer has no inputs")
        in_shapes = []
        for src in layer.inputs:
            if src == INPUT_NAME:
                in_shapes.append(input_shape)
            elif src in shapes:
                in_shapes.append(shapes[src])
            else:
                # forward or unknown references would make the graph cyclic
                raise ShapeError(layer.name, f"unknown or later input {src!r}")
        out, kshape, bshape = _infer_shape(layer, in_shapes)
        shapes[layer.name] = out
        if kshape is not None:
            weight_shapes[layer.name] = (kshape, bshape)
            total += _layer_param_count(kshape, bshape)
    if declared_params is not None and int(declared_params) != total:
        raise ShapeError(name, f"declared parameter count {declared_params} != computed {total}")
    desc = ModelDescriptor(name, input_shape, tuple(layers), shapes, weight_shapes, total)
    if io_contract:
        if input_shape != (FRAME_LEN, 1):
            raise ShapeError(INPUT_NAME, f"input must be ({FRAME_LEN}, 1), got {input_shape}")
        if int(np.prod(desc.output_shape)) != OUTPUT_LEN:
            raise ShapeError(desc.output_layer.name,
                             f"output must have {OUTPUT_LEN} values, got {desc.output_shape}")
    return desc


def load_descriptor(text: str, io_contract=True) -> ModelDescriptor:
    """Parse a JSON descriptor document (``"format": 1``)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"descriptor is not valid JSON: {e}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_VERSION:
        raise ParseError(f"descriptor must be an object with \"format\": {FORMAT_VERSION}")
    try:
        layers = []
        for entry in doc["layers"]:
            layers.append(LayerDescriptor(
                name=str(entry["name"]),
                kind=LayerKind(entry["kind"]),
                params=dict(entry.get("params", {})),
                inputs=tuple(entry["inputs"]),
            ))
        input_shape = tuple(doc.get("input_shape", (FRAME_LEN, 1)))
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"malformed descriptor: {e!r}") from None
    return build_descriptor(layers, input_shape, name=str(doc.get("name", "model")),
                            declared_params=doc.get("param_count"), io_contract=io_contract)


def _seq(*specs, first_input=INPUT_NAME):
    """Chain ``(name, kind, params)`` triples; an explicit 4th item overrides inputs."""
    layers, prev = [], first_input
    for spec in specs:
        name, kind, params = spec[:3]
        inputs = spec[3] if len(spec) > 3 else (prev,)
        layers.append(LayerDescriptor(name, kind, params, tuple(inputs)))
        prev = name
    return layers


def reference_mlp_descriptor() -> ModelDescriptor:
    """260 -> Dense 128 + ReLU -> Dense 520 + Sigmoid (100,488 parameters)."""
    K = LayerKind
    layers = _seq(
        ("flatten", K.FLATTEN, {}),
        ("dense1", K.DENSE, {"units": 128, "use_bias": True}),
        ("relu1", K.RELU, {}),
        ("dense2", K.DENSE, {"units": OUTPUT_LEN, "use_bias": True}),
        ("sigmoid", K.SIGMOID, {}),
    )
    return build_descriptor(layers, name="reference_mlp", io_contract=True)


def reference_unet_descriptor() -> ModelDescriptor:
    """Two-level 1-D U-Net: 260 -> 130 -> 65 -> 130 -> 260, two skip joins.

    The 1x1 projection ahead of the sigmoid is a per-position Dense; it is
    named ``dense_head`` so reuse-factor overrides written for dense layers
    apply to it.
    """
    K = LayerKind

    def conv(filters, k=3):
        return {"filters": filters, "kernel_size": k, "padding": "same", "use_bias": True}

    layers = _seq(
        ("conv1", K.CONV1D, conv(16)),
        ("relu1", K.RELU, {}),
        ("pool1", K.MAXPOOL1D, {"factor": 2}),
        ("conv2", K.CONV1D, conv(32)),
        ("relu2", K.RELU, {}),
        ("pool2", K.MAXPOOL1D, {"factor": 2}),
        ("conv3", K.CONV1D, conv(64)),
        ("relu3", K.RELU, {}),
        ("up1", K.UPSAMPLE1D, {"factor": 2}),
        ("concat1", K.CONCATENATE, {"skip": "relu2"}, ("up1", "relu2")),
        ("conv4", K.CONV1D, conv(32)),
        ("relu4", K.RELU, {}),
        ("up2", K.UPSAMPLE1D, {"factor": 2}),
        ("concat2", K.CONCATENATE, {"skip": "relu1"}, ("up2", "relu1")),
        ("conv5", K.CONV1D, conv(16)),
        ("relu5", K.RELU, {}),
        ("dense_head", K.CONV1D, conv(2, k=1)),
        ("sigmoid", K.SIGMOID, {}),
        ("flatten", K.FLATTEN, {}),
    )
    return build_descriptor(layers, name="reference_unet", io_contract=True)


# ---------------------------------------------------------------------------
# weights

@dataclass(frozen=True)
class Model:
    descriptor: ModelDescriptor
    weights: Mapping  # layer name -> (kernel ndarray, bias ndarray or None)

    def __post_init__(self):
        for name, (kshape, bshape) in self.descriptor.weight_shapes.items():
            if name not in self.weights:
                raise SizeMismatch(f"missing weights for layer {name!r}")
            k, b = self.weights[name]
            if tuple(np.shape(k)) != tuple(kshape):
                raise SizeMismatch(f"{name}: kernel shape {np.shape(k)} != {kshape}")
            if (b is None) != (bshape is None) or (b is not None and tuple(np.shape(b)) != tuple(bshape)):
                raise SizeMismatch(f"{name}: bias shape mismatch")


def load_weights(buf: bytes, descriptor: ModelDescriptor) -> Model:
    """Bind a flat little-endian float32 buffer to the descriptor's layers.

    Per layer, in descriptor order: kernel (Dense ``[in][out]``, Conv1D
    ``[kernel][in][out]``) then bias.
    """
    expected = descriptor.param_count * 4
    if len(buf) != expected:
        raise SizeMismatch(f"weight buffer has {len(buf)} bytes, expected {expected}")
    flat = np.frombuffer(buf, dtype="<f4").astype(np.float64)
    weights, pos = {}, 0
    for layer in descriptor.layers:
        if layer.name not in descriptor.weight_shapes:
            continue
        kshape, bshape = descriptor.weight_shapes[layer.name]
        n = int(np.prod(kshape))
        kernel = flat[pos:pos + n].reshape(kshape)
        pos += n
        bias = None
        if bshape is not None:
            nb = int(np.prod(bshape))
            bias = flat[pos:pos + nb].reshape(bshape)
            pos += nb
        weights[layer.name] = (kernel, bias)
    return Model(descriptor, weights)


def dump_weights(model: Model) -> bytes:
    parts = []
    for layer in model.descriptor.layers:
        if layer.name not in model.weights:
            continue
        k, b = model.weights[layer.name]
        parts.append(np.asarray(k, dtype="<f4").ravel())
        if b is not None:
            parts.append(np.asarray(b, dtype="<f4").ravel())
    if not parts:
        return b""
    return np.concatenate(parts).tobytes()


def write_weight_file(path, model: Model) -> None:
    """Weight file: one JSON header line, then the raw float32 payload."""
    header = json.dumps({"format": FORMAT_VERSION, "param_count": model.descriptor.param_count})
    with open(path, "wb") as f:
        f.write(header.encode() + b"\n")
        f.write(dump_weights(model))


def read_weight_file(path, descriptor: ModelDescriptor) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    nl = data.find(b"\n")
    try:
        header = json.loads(data[:nl])
    except (json.JSONDecodeError, ValueError):
        raise ParseError(f"{path}: missing weight file header") from None
    if nl < 0 or header.get("format") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported weight file format")
    return load_weights(data[nl + 1:], descriptor)


def zero_model(descriptor: ModelDescriptor) -> Model:
    return load_weights(bytes(descriptor.param_count * 4), descriptor)


# ---------------------------------------------------------------------------
# frames and outputs

@dataclass(frozen=True)
class Frame:
    values: np.ndarray
    seq: int = 0
    timestamp_ns: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (FRAME_LEN,):
            raise ValueError(f"frame must hold {FRAME_LEN} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFinite("frame contains NaN or inf")
        object.__setattr__(self, "values", v)


@dataclass
class InferenceOutput:
    values: np.ndarray  # 520 probabilities, MI at even indices, RR at odd
    decision: Source | None  # None when the graph is not 520-wide
    overflow: fxp.OverflowLog | None = None
    codes: np.ndarray | None = None  # fixed path only
    spec: fxp.FixedSpec | None = None  # fixed path only

    @classmethod
    def from_values(cls, values, **kw):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(values, _decision(values), **kw)


def _decision(values):
    return decide_source(values) if values.size == OUTPUT_LEN else None


def _frame_values(frame) -> np.ndarray:
    if isinstance(frame, Frame):
        return frame.values
    return Frame(frame).values


# ---------------------------------------------------------------------------
# shared tensor plumbing (batched: leading axis is the batch)

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, L, C) -> (B, L, k*C) windows for 'same' padding, ordered [tap][channel]."""
    left = (k - 1) // 2
    right = k - 1 - left
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    L = x.shape[1]
    cols = np.stack([xp[:, t:t + L, :] for t in range(k)], axis=2)
    return cols.reshape(x.shape[0], L, k * x.shape[2])


def _maxpool(x: np.ndarray, f: int) -> np.ndarray:
    B, L, C = x.shape
    n = L // f  # trailing element of an odd length is dropped
    return x[:, :n * f, :].reshape(B, n, f, C).max(axis=2)


def _upsample(x: np.ndarray, f: int) -> np.ndarray:
    return np.repeat(x, f, axis=1)


def _flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


# ---------------------------------------------------------------------------
# float path (the in-repo oracle)

def forward_float(model: Model, x, observe: Callable[[str, np.ndarray], None] | None = None) -> np.ndarray:
    """Double-precision forward pass over a batch ``x`` of shape (B, *input_shape)."""
    desc = model.descriptor
    x = np.asarray(x, dtype=np.float64).reshape((-1,) + desc.input_shape)
    acts = {INPUT_NAME: x}
    for layer in desc.layers:
        ins = [acts[s] for s in layer.inputs]
        kind, p = layer.kind, layer.params
        if kind is LayerKind.DENSE:
            k, b = model.weights[layer.name]
            y = ins[0] @ k
            if b is not None:
                y = y + b
        elif kind is LayerKind.CONV1D:
            k, b = model.weights[layer.name]
            y = _im2col(ins[0], k.shape[0]) @ k.reshape(-1, k.shape[2])
            if b is not None:
                y = y + b
        elif kind is LayerKind.MAXPOOL1D:
            y = _maxpool(ins[0], int(p.get("factor", 2)))
        elif kind is LayerKind.UPSAMPLE1D:
            y = _upsample(ins[0], int(p.get("factor", 2)))
        elif kind is LayerKind.CONCATENATE:
            y = np.concatenate(ins, axis=-1)
        elif kind is LayerKind.RELU:
            y = np.maximum(ins[0], 0.0)
        elif kind is LayerKind.SIGMOID:
            y = expit(ins[0])
        elif kind is LayerKind.FLATTEN:
            y = _flatten(ins[0])
        else:  # pragma: no cover - descriptor validation rejects this
            raise ShapeError(layer.name, f"unsupported kind {kind}")
        acts[layer.name] = y
        if observe is not None:
            observe(layer.name, y)
    return _flatten(acts[desc.output_layer.name])


def infer_float(model: Model, frame) -> InferenceOutput:
    out = forward_float(model, _frame_values(frame)[None, :])
    return InferenceOutput.from_values(out[0])


# ---------------------------------------------------------------------------
# fixed-point path

SIGMOID_LO = -8.0
SIGMOID_HI = 8.0
SIGMOID_ENTRIES = 1024
SIGMOID_MAX_ENTRIES = 1 << 20
_TABLE_BASE_BITS = 18  # formats up to this width use the 1024-entry table


def sigmoid_entries(spec: fxp.FixedSpec) -> int:
    """Table size for a spec: 1024 up to 18 bits, doubling per extra bit after that.

    A piecewise-constant table with 1024 buckets over [-8, 8) is off by up to
    ~2e-3 near 0, far coarser than a 32-bit grid; growing it keeps the fixed
    path converging to the float path as the width increases.
    """
    return min(SIGMOID_ENTRIES << max(0, spec.total_bits - _TABLE_BASE_BITS), SIGMOID_MAX_ENTRIES)


class SigmoidTable:
    """Piecewise-constant sigmoid over [-8, 8), quantized to ``spec``.

    Each entry holds the sigmoid at its bucket midpoint, capped at ``1 - ulp``.
    Inputs below -8 map to 0, inputs at or above 8 map to ``1 - ulp``.
    """

    def __init__(self, spec: fxp.FixedSpec, entries: int | None = None):
        self.spec = spec
        self.entries = entries or sigmoid_entries(spec)
        if self.entries & (self.entries - 1) or self.entries < 16:
            raise ValueError("table size must be a power of two >= 16")
        self._step_log2 = self.entries.bit_length() - 1 - 4  # bucket width 16 / entries
        mids = SIGMOID_LO + (np.arange(self.entries) + 0.5) * 2.0 ** -self._step_log2
        codes, over = fxp.quantize_array(expit(mids), spec)
        self.high_code = min((1 << spec.frac_bits) - 1, spec.max_code)
        self.low_code = 0
        # 1 - ulp is the largest value below 1; keeps the clamp above monotone
        self.codes = np.minimum(codes, self.high_code)
        self.saturated = over

    def lookup(self, codes: np.ndarray, in_frac: int) -> tuple[np.ndarray, np.ndarray]:
        """Return output codes and a mask of lookups that hit a saturated entry."""
        codes = np.asarray(codes, dtype=np.int64)
        # bucket = floor((x + 8) * entries / 16) computed on the integer code
        idx = ((codes + (8 << in_frac)) << self._step_log2) >> in_frac
        safe = np.clip(idx, 0, self.entries - 1)
        out = self.codes[safe]
        out = np.where(idx < 0, self.low_code, out)
        out = np.where(idx >= self.entries, self.high_code, out)
        hit = self.saturated[safe] & (idx >= 0) & (idx < self.entries)
        return out.astype(np.int64), hit


def sigmoid_fixed(x: fxp.FixedValue, table: SigmoidTable) -> fxp.FixedValue:
    out, _ = table.lookup(np.array([x.code]), x.spec.frac_bits)
    return fxp.FixedValue(int(out[0]), table.spec)


_TABLE_CACHE: dict = {}


def _sigmoid_table(spec: fxp.FixedSpec) -> SigmoidTable:
    table = _TABLE_CACHE.get(spec)
    if table is None:
        table = _TABLE_CACHE[spec] = SigmoidTable(spec)
    return table


def _acc_bound(x_spec: fxp.FixedSpec, w_spec: fxp.FixedSpec, fan_in: int) -> int:
    """Largest |accumulator| a dot product can reach (bias included)."""
    prod = 1 << (x_spec.total_bits - 1 + w_spec.total_bits - 1)
    bias = 1 << (w_spec.total_bits - 1 + x_spec.frac_bits)
    return fan_in * prod + bias


def _dot_codes(x: np.ndarray, w: np.ndarray, bias_shifted, bound: int,
               w_float: np.ndarray | None = None) -> np.ndarray:
    """Exact integer ``x @ w + bias`` on codes.

    The widened accumulator (2W + log2(fan-in) bits) is never truncated; the
    backend is picked so no intermediate can round or overflow.
    """
    if bound < 2 ** 53:
        # every partial sum is an integer below 2**53, so float64 BLAS is exact
        acc = x.astype(np.float64) @ (w.astype(np.float64) if w_float is None else w_float)
        if bias_shifted is not None:
            acc = acc + bias_shifted.astype(np.float64)
        return acc.astype(np.int64)
    if bound < 2 ** 62:
        acc = x @ w
        if bias_shifted is not None:
            acc = acc + bias_shifted
        return acc
    # split the weights into 16-bit halves; each half-product fits int64
    w_lo = w & 0xFFFF
    w_hi = w >> 16
    lo = x @ w_lo
    hi = x @ w_hi
    acc = (hi.astype(object) << 16) + lo.astype(object)
    if bias_shifted is not None:
        acc = acc + np.asarray(bias_shifted).astype(object)
    return acc


def forward_fixed(qmodel, x, log: fxp.OverflowLog | None = None):
    """Fixed-point forward pass over a batch of real-valued inputs.

    ``qmodel`` is a :class:`~blmnode.quant.QuantizedModel`. Inputs are put on
    the first layer's grid before the first layer runs. Returns
    ``(output codes (B, N), output spec, log)``; the log accumulates over the
    whole batch.
    """
    desc = qmodel.descriptor
    plan = qmodel.plan
    log = fxp.OverflowLog() if log is None else log
    x = np.asarray(x, dtype=np.float64).reshape((-1,) + desc.input_shape)
    first = plan.spec_for(desc.layers[0].name)
    codes, over = fxp.quantize_array(x, first)
    log.add(INPUT_NAME, int(over.sum()))
    acts = {INPUT_NAME: (codes, first)}

    for layer in desc.layers:
        spec = plan.spec_for(layer.name)
        ins = [acts[s] for s in layer.inputs]
        kind, p = layer.kind, layer.params
        if kind in ARITHMETIC_KINDS:
            xc, xs = ins[0]
            wc, bc = qmodel.codes[layer.name]
            if kind is LayerKind.CONV1D:
                xc = _im2col(xc, wc.shape[0])
            wc = qmodel.kernel_matrix(layer.name)
            bound = _acc_bound(xs, spec, wc.shape[0])
            wf = qmodel.kernel_matrix(layer.name, as_float=True) if bound < 2 ** 53 else None
            bias = None if bc is None else (bc << xs.frac_bits)
            acc = _dot_codes(xc, wc, bias, bound, wf)
            y, over = fxp.requantize(acc, xs.frac_bits + spec.frac_bits, spec)
        elif kind is LayerKind.SIGMOID:
            xc, xs = ins[0]
            y, over = _sigmoid_table(spec).lookup(xc, xs.frac_bits)
        elif kind is LayerKind.CONCATENATE:
            parts, over_parts = [], []
            for xc, xs in ins:
                c, o = fxp.requantize(xc, xs.frac_bits, spec)
                parts.append(c)
                over_parts.append(o)
            y = np.concatenate(parts, axis=-1)
            over = np.concatenate(over_parts, axis=-1)
        else:
            xc, xs = ins[0]
            if kind is LayerKind.MAXPOOL1D:
                moved = _maxpool(xc, int(p.get("factor", 2)))
            elif kind is LayerKind.UPSAMPLE1D:
                moved = _upsample(xc, int(p.get("factor", 2)))
            elif kind is LayerKind.RELU:
                moved = np.maximum(xc, 0)
            elif kind is LayerKind.FLATTEN:
                moved = _flatten(xc)
            else:  # pragma: no cover
                raise ShapeError(layer.name, f"unsupported kind {kind}")
            y, over = fxp.requantize(moved, xs.frac_bits, spec)
        log.add(layer.name, int(np.count_nonzero(over)))
        acts[layer.name] = (y, spec)

    out, out_spec = acts[desc.output_layer.name]
    return _flatten(out), out_spec, log


def _as_quantized(model, plan):
    from .quant import QuantizedModel, quantize_model

    if isinstance(model, QuantizedModel):
        if plan is not None and plan is not model.plan and plan != model.plan:
            raise PlanMismatch("<model>", "quantized model was built for a different plan")
        return model
    if plan is None:
        raise PlanMismatch("<model>", "a precision plan is required for a float model")
    return quantize_model(model, plan)


def infer_fixed(model, frame, plan=None) -> InferenceOutput:
    """Quantized inference for one frame.

    ``model`` is either a float :class:`Model` (quantized against ``plan``) or
    an already quantized model. Raises :class:`PlanMismatch` if the plan
    misses a layer.
    """
    qmodel = _as_quantized(model, plan)
    codes, spec, log = forward_fixed(qmodel, _frame_values(frame)[None, :])
    values = fxp.codes_to_real(codes[0], spec)
    return InferenceOutput(values, _decision(values), overflow=log, codes=codes[0], spec=spec)


def infer_fixed_batch(model, frames, plan=None):
    """Quantized outputs for many frames: ``(values (B, N), OverflowLog)``."""
    qmodel = _as_quantized(model, plan)
    codes, spec, log = forward_fixed(qmodel, frames)
    return fxp.codes_to_real(codes, spec), log


def infer_float_batch(model: Model, frames) -> np.ndarray:
    return forward_float(model, frames)
