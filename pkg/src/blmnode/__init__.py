"""Software model of an FPGA-SoC beam-loss de-blending node.

Modules:

- ``fxp``: bit-exact signed fixed-point arithmetic
- ``nn``: layer-graph network engine (float oracle and quantized path)
- ``quant``: calibration and per-layer precision planning
- ``perf``: reuse-factor resource and latency estimator
- ``bridge``: host/accelerator memory-mapped transaction simulator
- ``node``: UDP real-time inference service and frame replay
- ``workbench``: synthetic fixtures, metrics and comparison reports
"""
from . import bridge, fxp, nn, node, perf, quant, workbench
from .decision import Source, decide_source
from .errors import (BadParams, BadSpec, BindError, BlmNodeError, Busy, EmptyCalibrationSet,
                     ModelLoadError, NonFinite, ParseError, PlanMismatch, ShapeError,
                     SizeMismatch)
from .fxp import FixedSpec, FixedValue, Overflow, Rounding, make_spec, parse_spec, quantize

__version__ = "0.1.0"

__all__ = [
    "bridge", "fxp", "nn", "node", "perf", "quant", "workbench",
    "Source", "decide_source",
    "BadParams", "BadSpec", "BindError", "BlmNodeError", "Busy", "EmptyCalibrationSet",
    "ModelLoadError", "NonFinite", "ParseError", "PlanMismatch", "ShapeError", "SizeMismatch",
    "FixedSpec", "FixedValue", "Overflow", "Rounding", "make_spec", "parse_spec", "quantize",
]
