"""Frame-level MI/RR decision rule shared by the engine, node and workbench."""
from __future__ import annotations

import enum

import numpy as np

OUTPUT_LEN = 520


class Source(enum.IntEnum):
    MI = 0
    RR = 1


def decide_source(output) -> Source:
    """Sum MI (even) and RR (odd) probabilities; the larger sum wins, ties go to MI."""
    out = np.asarray(output, dtype=np.float64)
    if out.shape != (OUTPUT_LEN,):
        raise ValueError(f"expected {OUTPUT_LEN} output values, got shape {out.shape}")
    mi = float(np.sum(out[0::2]))
    rr = float(np.sum(out[1::2]))
    return Source.RR if rr > mi else Source.MI
