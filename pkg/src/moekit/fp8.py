"""Simulated 8-bit float quantization with per-tensor scaling.

Values are scaled, rounded to the nearest representable 8-bit code
(ties-to-even on the mantissa), saturated at the format maximum, and
scaled back to working precision. Nothing is ever stored in 8 bits; the
formats' rounding behavior is the testable content.

E4M3 follows the convention without infinities (max finite 448, NaN at
exponent 15 / mantissa 7). E5M2 is IEEE-like and retains infinities
(max finite 57344), though quantization saturates rather than overflowing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import NumericError
from .tensor import Tensor


class Fp8Format(enum.Enum):
    E4M3 = "e4m3"
    E5M2 = "e5m2"


_FORMAT_PARAMS = {
    # (exponent bits, mantissa bits, bias, has infinities)
    Fp8Format.E4M3: (4, 3, 7, False),
    Fp8Format.E5M2: (5, 2, 15, True),
}


@dataclass(frozen=True)
class Fp8Spec:
    """Quantization target: format plus an optional explicit scale.

    `per_tensor_scale=None` selects the automatic scale
    max_abs(tensor) / format_max (1.0 for an all-zero tensor).
    """

    format: Fp8Format = Fp8Format.E4M3
    per_tensor_scale: float | None = None

    def __post_init__(self):
        if self.per_tensor_scale is not None and not self.per_tensor_scale > 0:
            raise ValueError("per_tensor_scale must be > 0")


def code_points(fmt: Fp8Format) -> list[float]:
    """All 256 code values of the format, in code order (NaN/inf included)."""
    eb, mb, bias, has_inf = _FORMAT_PARAMS[fmt]
    values = []
    for code in range(256):
        sign = -1.0 if code >> 7 else 1.0
        e = (code >> mb) & ((1 << eb) - 1)
        m = code & ((1 << mb) - 1)
        if e == (1 << eb) - 1:
            if has_inf:
                values.append(sign * math.inf if m == 0 else math.nan)
                continue
            if m == (1 << mb) - 1:
                values.append(math.nan)
                continue
        if e == 0:
            v = (m / (1 << mb)) * 2.0 ** (1 - bias)
        else:
            v = (1.0 + m / (1 << mb)) * 2.0 ** (e - bias)
        values.append(sign * v)
    return values


def format_max(fmt: Fp8Format) -> float:
    """Largest finite magnitude of the format (448 for E4M3)."""
    return _positive_grid(fmt)[0][-1]


@lru_cache(maxsize=None)
def _positive_grid(fmt: Fp8Format) -> tuple[np.ndarray, np.ndarray]:
    """Sorted non-negative finite values and their mantissa-LSB parity."""
    eb, mb, bias, has_inf = _FORMAT_PARAMS[fmt]
    vals, parity = [], []
    for e in range(1 << eb):
        for m in range(1 << mb):
            if e == (1 << eb) - 1 and (has_inf or m == (1 << mb) - 1):
                continue  # inf / NaN codes
            if e == 0:
                v = (m / (1 << mb)) * 2.0 ** (1 - bias)
            else:
                v = (1.0 + m / (1 << mb)) * 2.0 ** (e - bias)
            vals.append(v)
            parity.append(m & 1)
    return np.asarray(vals, dtype=np.float64), np.asarray(parity, dtype=np.int64)


def _round_to_grid(x: np.ndarray, fmt: Fp8Format) -> np.ndarray:
    """Round |scaled values| to the nearest grid point, ties-to-even."""
    grid, parity = _positive_grid(fmt)
    absx = np.abs(x)
    hi = np.searchsorted(grid, absx, side="left")
    hi = np.clip(hi, 0, len(grid) - 1)
    lo = np.clip(hi - 1, 0, len(grid) - 1)
    d_lo = absx - grid[lo]
    d_hi = grid[hi] - absx
    # Above the max finite value both candidates collapse to the max: saturate.
    take_hi = d_hi < d_lo
    tie = d_hi == d_lo
    # Adjacent codes alternate mantissa parity, so exactly one side is even.
    take_hi |= tie & (parity[hi] == 0)
    nearest = np.where(take_hi, grid[hi], grid[lo])
    nearest = np.where(absx >= grid[-1], grid[-1], nearest)
    return np.copysign(nearest, x)


def fp8_quantize(t: Tensor, spec: Fp8Spec) -> Tensor:
    """Quantize to the 8-bit grid and dequantize back to working precision.

    Automatic scaling anchors the largest-magnitude element exactly, so
    quantizing an already-quantized tensor reproduces it bit-for-bit.
    """
    a = np.asarray(t.data, dtype=np.float64)
    if not np.isfinite(a).all():
        raise NumericError("fp8_quantize requires finite inputs")
    fmax = format_max(spec.format)
    max_abs = float(np.abs(a).max()) if a.size else 0.0
    if spec.per_tensor_scale is None:
        scale = max_abs / fmax if max_abs > 0.0 else 1.0
    else:
        scale = float(spec.per_tensor_scale)
    codes = _round_to_grid(a / scale, spec.format)
    result = codes * scale
    if spec.per_tensor_scale is None and max_abs > 0.0:
        # codes that hit the format max correspond exactly to max_abs; writing
        # that value directly keeps the auto scale a fixed point of quantization
        result = np.where(np.abs(codes) == fmax, np.copysign(max_abs, codes), result)
    return Tensor(result.astype(t.data.dtype))
