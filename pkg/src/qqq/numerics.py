"""IEEE binary16 scalar semantics and deterministic dense-matrix primitives.

All "wide" arithmetic in this library is float64. Binary16 encode/decode is
delegated to numpy's half type, which implements round-to-nearest-even with
full subnormal support; NaN is canonicalized to a single pattern so that
bit-equality tests are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = [
    "NAN_BITS",
    "Binary16",
    "encode_f16",
    "decode_f16",
    "fma_f16",
    "f16_round_array",
    "f16_bits_array",
    "matmul_ref",
]

# Canonical quiet-NaN pattern (sign 0, all-ones exponent, msb of mantissa set).
NAN_BITS = 0x7E00


@dataclass(frozen=True)
class Binary16:
    """An IEEE 754 binary16 value carried as its exact 16-bit pattern."""

    bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"binary16 pattern out of range: {self.bits:#x}")

    @classmethod
    def from_float(cls, x: float) -> "Binary16":
        return encode_f16(x)

    def to_float(self) -> float:
        return decode_f16(self)

    def is_nan(self) -> bool:
        return (self.bits & 0x7C00) == 0x7C00 and (self.bits & 0x03FF) != 0

    def __repr__(self) -> str:
        return f"Binary16(bits=0x{self.bits:04X}, value={self.to_float()!r})"


def encode_f16(x: float) -> Binary16:
    """Round a wide real to binary16 (round-to-nearest-even, overflow to inf)."""
    if math.isnan(x):
        return Binary16(NAN_BITS)
    with np.errstate(over="ignore"):
        h = np.float16(np.float64(x))
    return Binary16(int(h.view(np.uint16)))


def decode_f16(v: Binary16) -> float:
    """Exact real value of a binary16 pattern (subnormals included)."""
    return float(np.uint16(v.bits).view(np.float16))


def fma_f16(a: Binary16, b: Binary16, c: Binary16) -> Binary16:
    """Fused multiply-add: a*b + c with a single rounding to binary16.

    The product of two binary16 values is exact in float64 (22 significand
    bits), so float64 evaluation realizes the single-rounding contract for
    all inputs this library produces.
    """
    fa, fb, fc = decode_f16(a), decode_f16(b), decode_f16(c)
    return encode_f16(fa * fb + fc)


def f16_round_array(x: np.ndarray) -> np.ndarray:
    """Round a float64 array through binary16 and back (vectorized encode∘decode)."""
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float64).astype(np.float16).astype(np.float64)


def f16_bits_array(x: np.ndarray) -> np.ndarray:
    """Binary16 bit patterns (uint16) of a float64 array."""
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float64).astype(np.float16).view(np.uint16)


def matmul_ref(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Wide-precision matrix product with a fixed sequential-k summation order.

    The deterministic order makes this the bit-reproducible oracle every GEMM
    path is compared against; do not replace with np.dot (blocked summation).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul_ref expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out
