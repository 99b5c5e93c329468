"""Activation quantization and input binarization primitives.

Everything downstream (tree evaluation, table compilation, the netlist
runtime) depends on these being deterministic: a code is produced by one
and only one formula, evaluated in float64, with round-half-to-even.
The compiled lookup tables are bit-exact against the reference forward
pass precisely because both run through `quantize` / `dequantize` here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuantSpec",
    "BinarizeSpec",
    "QuantError",
    "quantize",
    "dequantize",
    "fake_quantize",
    "binarize",
]


class QuantError(ValueError):
    """Invalid quantization configuration or out-of-range code."""


@dataclass(frozen=True)
class QuantSpec:
    """Uniform affine quantizer over [lo, hi] with 2**bits levels.

    Code 0 maps to `lo`, code 2**bits - 1 maps to `hi`, and rounding is
    half-to-even. Inputs outside [lo, hi] clip to the nearest bound.
    """

    bits: int
    lo: float
    hi: float
    rounding: str = "nearest-even"

    def __post_init__(self):
        if not isinstance(self.bits, int) or not (1 <= self.bits <= 8):
            raise QuantError(f"bits must be an integer in [1, 8], got {self.bits!r}")
        if not (float(self.hi) > float(self.lo)):
            raise QuantError(f"hi must exceed lo, got lo={self.lo} hi={self.hi}")
        if self.rounding != "nearest-even":
            raise QuantError(f"unsupported rounding rule {self.rounding!r}")
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))

    @property
    def levels(self) -> int:
        return 1 << self.bits

    @property
    def max_code(self) -> int:
        return self.levels - 1

    def to_json(self) -> dict:
        return {"bits": self.bits, "lo": self.lo, "hi": self.hi, "rounding": self.rounding}

    @staticmethod
    def from_json(d: dict) -> "QuantSpec":
        return QuantSpec(bits=int(d["bits"]), lo=float(d["lo"]), hi=float(d["hi"]),
                         rounding=d.get("rounding", "nearest-even"))


@dataclass(frozen=True)
class BinarizeSpec:
    """Pixel binarization: output 1 iff input is strictly above `threshold`."""

    threshold: float

    def __post_init__(self):
        if not (0.0 <= float(self.threshold) <= 1.0):
            raise QuantError(f"threshold must lie in [0, 1], got {self.threshold}")
        object.__setattr__(self, "threshold", float(self.threshold))

    def to_json(self) -> dict:
        return {"threshold": self.threshold}

    @staticmethod
    def from_json(d: dict) -> "BinarizeSpec":
        return BinarizeSpec(threshold=float(d["threshold"]))


def quantize(x, spec: QuantSpec):
    """Map real values to integer codes in [0, 2**bits - 1].

    Total function: values outside [lo, hi] clip to the bounds. The grid
    position is computed as (x - lo) * max_code / (hi - lo) so that exact
    midpoints (e.g. 0.5 on a 4-bit [0, 1] grid) stay exact in float64
    before the half-to-even rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    t = (x - spec.lo) * float(spec.max_code) / (spec.hi - spec.lo)
    c = np.asarray(np.rint(t))
    c = np.clip(c, 0.0, float(spec.max_code))
    out = c.astype(np.int64)
    return out if out.ndim else int(out)


def dequantize(code, spec: QuantSpec):
    """Map integer codes back to the real grid: lo + code * (hi - lo) / max_code."""
    c = np.asarray(code)
    if not np.issubdtype(c.dtype, np.integer):
        raise QuantError(f"codes must be integers, got dtype {c.dtype}")
    if c.size and (c.min() < 0 or c.max() > spec.max_code):
        raise QuantError(
            f"code out of range for {spec.bits}-bit spec: "
            f"[{int(c.min())}, {int(c.max())}] not within [0, {spec.max_code}]")
    x = spec.lo + c.astype(np.float64) * (spec.hi - spec.lo) / float(spec.max_code)
    return x if x.ndim else float(x)


def fake_quantize(x, spec: QuantSpec):
    """quantize-then-dequantize: snap real values onto the code grid."""
    return dequantize(quantize(x, spec), spec)


def binarize(x, spec: BinarizeSpec):
    """1 iff x > threshold (strict), else 0. Equality yields 0."""
    x = np.asarray(x, dtype=np.float64)
    out = (x > spec.threshold).astype(np.uint8)
    return out if out.ndim else int(out)
