"""Fixed-point primitives shared by the reference kernels.

Conventions: activations are signed 8-bit dynamic fixed point, partial sums
are 32-bit, rounding is half away from zero and every 8-bit store saturates.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import CompileError

I8_MIN, I8_MAX = -128, 127
OPERAND_MIN, OPERAND_MAX = -256, 255        # signed 9-bit MAC operands

# shared-MAC packing: the second weight sits 18 bits above the first inside
# the 27-bit pre-adder result; the 48-bit product is split at bit 18
PACK_SHIFT = 18
_LOW_MASK = (1 << PACK_SHIFT) - 1
_LOW_SIGN = 1 << (PACK_SHIFT - 1)
P_BITS = 48
_P_MASK = (1 << P_BITS) - 1
_P_SIGN = 1 << (P_BITS - 1)

# LUT formats: input Q4.3, sigmoid output Q0.7, swish output Q4.3
LUT_IN_FRAC = 3
SIGMOID_OUT_FRAC = 7
SWISH_OUT_FRAC = 3
LEAKY_NUM, LEAKY_SHIFT = 13, 7              # slope 13/128 ~ 0.1


class RangeError(CompileError, ValueError):
    """An operand lies outside the range the datapath accepts."""


def saturate(x, lo=I8_MIN, hi=I8_MAX):
    return np.clip(x, lo, hi)


def shift_round(x, shift):
    """``x / 2**shift`` rounded half away from zero (integers in, integers out)."""
    x = np.asarray(x, dtype=np.int64)
    if shift <= 0:
        return x << -shift if shift < 0 else x.copy()
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(x) + half) >> shift
    return np.where(x < 0, -mag, mag)


def div_round(x, d):
    """``x / d`` rounded half away from zero for a positive integer ``d``."""
    x = np.asarray(x, dtype=np.int64)
    mag = (2 * np.abs(x) + d) // (2 * d)
    return np.where(x < 0, -mag, mag)


def wrap32(x):
    """Two's complement wrap of a partial sum to its 32-bit register."""
    return np.asarray(x, dtype=np.int64).astype(np.int32).astype(np.int64)


def requantize(acc, shift):
    return saturate(shift_round(acc, shift))


# --------------------------------------------------------------------------
# shared-MAC double multiplication


def _check_operands(*values):
    for v in values:
        a = np.asarray(v)
        if a.size and (a.min() < OPERAND_MIN or a.max() > OPERAND_MAX):
            raise RangeError(f"operand outside the signed 9-bit range "
                             f"[{OPERAND_MIN}, {OPERAND_MAX}]")


def double_mac(i, w0, w1):
    """Both products ``(I*W0, I*W1)`` from one wide multiplication.

    The two weights are packed into one pre-adder operand
    ``A = W0 + W1 * 2**18`` and multiplied by the shared input.  The 48-bit
    product holds ``I*W0`` in its low 18 bits (two's complement) and
    ``I*W1`` above them, minus one whenever the low field is negative; the
    correction adds that borrow back.
    """
    _check_operands(i, w0, w1)
    i = int(i)
    a = int(w0) + int(w1) * (1 << PACK_SHIFT)
    p = (a * i) & _P_MASK
    if p & _P_SIGN:
        p -= 1 << P_BITS
    low = p & _LOW_MASK
    m0 = low - (1 << PACK_SHIFT) if low & _LOW_SIGN else low
    m1 = (p >> PACK_SHIFT) + (1 if m0 < 0 else 0)
    return m0, m1


def double_mac_array(i, w0, w1, check=True):
    """Vectorized :func:`double_mac` over broadcastable integer arrays."""
    if check:
        _check_operands(i, w0, w1)
    i = np.asarray(i, dtype=np.int64)
    a = np.asarray(w0, dtype=np.int64) + (np.asarray(w1, dtype=np.int64) << PACK_SHIFT)
    p = (a * i) & _P_MASK
    p = np.where(p & _P_SIGN, p - (1 << P_BITS), p)
    low = p & _LOW_MASK
    m0 = np.where(low & _LOW_SIGN, low - (1 << PACK_SHIFT), low)
    m1 = (p >> PACK_SHIFT) + (m0 < 0)
    return m0, m1


# --------------------------------------------------------------------------
# activations


def _build_lut(kind):
    table = np.zeros(256, dtype=np.int64)
    for code in range(256):
        q = code - 256 if code >= 128 else code
        x = q / (1 << LUT_IN_FRAC)
        s = 1.0 / (1.0 + math.exp(-x))
        if kind == "sigmoid":
            y = s * (1 << SIGMOID_OUT_FRAC)
        else:
            y = x * s * (1 << SWISH_OUT_FRAC)
        r = math.floor(abs(y) + 0.5) * (1 if y >= 0 else -1)
        table[code] = min(max(r, I8_MIN), I8_MAX)
    table.setflags(write=False)
    return table


LUTS = {"sigmoid": _build_lut("sigmoid"), "swish": _build_lut("swish")}


def lut_activation(kind, x):
    """8-bit table activation; ``x`` is Q4.3, indexed by its two's complement byte."""
    if kind not in LUTS:
        raise ValueError(f"no lookup table for {kind!r}")
    x = np.asarray(x, dtype=np.int64)
    if x.size and (x.min() < I8_MIN or x.max() > I8_MAX):
        raise RangeError("table activation input must be 8-bit")
    return LUTS[kind][x & 0xFF]


def activate(kind, x):
    x = np.asarray(x, dtype=np.int64)
    if kind == "none":
        return x
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "leaky":
        return np.where(x >= 0, x, shift_round(x * LEAKY_NUM, LEAKY_SHIFT))
    return lut_activation(kind, x)
