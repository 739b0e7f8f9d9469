"""Symmetric INT8 activation and INT4 weight quantization, plus nibble packing.

Conventions (fixed for the whole toolkit):
  * activations: per-token scale max|row|/127, codes clamped to [-127, 127]
  * weights: scale max|column|/7 (per channel or per group), codes in [-8, 7]
  * rounding is half-to-even everywhere, matching binary16 rounding so the
    software quantizer and the bit-trick GEMM path agree
  * all-zero rows/columns/groups get scale 1.0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, ShapeError
from .numerics import f16_round_array

__all__ = [
    "QuantSpec",
    "QuantizedActivations",
    "QuantizedWeights",
    "quant_act_per_token",
    "quant_weight_per_channel",
    "quant_weight_per_group",
    "requant_scale",
    "pack_i4",
    "unpack_i4",
    "dequantize_ref",
]

PER_CHANNEL = "per-channel"
PER_GROUP = "per-group"


@dataclass(frozen=True)
class QuantSpec:
    """Weight/activation bit widths and weight quantization granularity."""

    scheme: str = PER_CHANNEL
    group_size: int = 128

    weight_bits = 4
    act_bits = 8

    def __post_init__(self) -> None:
        if self.scheme not in (PER_CHANNEL, PER_GROUP):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.group_size <= 0:
            raise ConfigError("group_size must be positive")


@dataclass
class QuantizedActivations:
    q: np.ndarray  # int8, tokens x K
    s_a: np.ndarray  # float64, per-token scales, strictly positive

    def dequantize(self) -> np.ndarray:
        return self.q.astype(np.float64) * self.s_a[:, None]


@dataclass
class QuantizedWeights:
    """Packed INT4 weight tensor with its scale hierarchy.

    Exactly one of (s_w) / (s_wg, s_wc) is populated, matching the scheme.
    `packed` stores two codes per byte (see pack_i4); `rows` is the true K.
    """

    packed: np.ndarray  # uint8, ceil(K/2) x N
    rows: int
    cols: int
    scheme: str
    group_size: int = 0
    s_w: Optional[np.ndarray] = None  # per-channel scales, length N
    s_wg: Optional[np.ndarray] = None  # group scales, K/g x N
    s_wc: Optional[np.ndarray] = None  # derived requant scales, length N

    def codes(self) -> np.ndarray:
        return unpack_i4(self.packed, self.rows)


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError(f"{what} contains non-finite values")
    return x


def quant_act_per_token(x: np.ndarray) -> QuantizedActivations:
    """Symmetric per-token INT8 quantization of an activation matrix."""
    x = _check_finite(x, "activations")
    if x.ndim != 2:
        raise ShapeError("activations must be 2-D (tokens x K)")
    m = np.abs(x).max(axis=1)
    s = np.where(m > 0.0, m / 127.0, 1.0)
    q = np.clip(np.rint(x / s[:, None]), -127, 127).astype(np.int8)
    return QuantizedActivations(q=q, s_a=s)


def _symmetric_i4(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # w: rows x N -> per-column scale and codes in [-8, 7]
    m = np.abs(w).max(axis=0)
    s = np.where(m > 0.0, m / 7.0, 1.0)
    q = np.clip(np.rint(w / s[None, :]), -8, 7).astype(np.int8)
    return q, s


def quant_weight_per_channel(w: np.ndarray) -> QuantizedWeights:
    """Symmetric per-output-channel INT4 quantization of a K x N weight matrix."""
    w = _check_finite(w, "weights")
    if w.ndim != 2:
        raise ShapeError("weights must be 2-D (K x N)")
    q, s = _symmetric_i4(w)
    return QuantizedWeights(
        packed=pack_i4(q),
        rows=w.shape[0],
        cols=w.shape[1],
        scheme=PER_CHANNEL,
        s_w=s,
    )


def quant_weight_per_group(w: np.ndarray, spec: QuantSpec) -> QuantizedWeights:
    """Per-group INT4 quantization plus the derived per-channel requant scale."""
    w = _check_finite(w, "weights")
    if w.ndim != 2:
        raise ShapeError("weights must be 2-D (K x N)")
    k, n = w.shape
    gs = spec.group_size
    if k % gs != 0:
        raise ConfigError(f"group_size {gs} does not divide K={k}")
    grouped = w.reshape(k // gs, gs, n)
    m = np.abs(grouped).max(axis=1)  # G x N
    s_wg = np.where(m > 0.0, m / 7.0, 1.0)
    q = np.clip(np.rint(grouped / s_wg[:, None, :]), -8, 7)
    q = q.reshape(k, n).astype(np.int8)
    s_wc = requant_scale(q, s_wg)
    return QuantizedWeights(
        packed=pack_i4(q),
        rows=k,
        cols=n,
        scheme=PER_GROUP,
        group_size=gs,
        s_wg=s_wg,
        s_wc=s_wc,
    )


def requant_scale(q4: np.ndarray, s_wg: np.ndarray) -> np.ndarray:
    """Per-channel scale mapping binary16-dequantized group weights into INT8.

    The max is taken over binary16-rounded dequantized values because the
    per-group kernel sees FP16 intermediates; the resulting bound guarantees
    every requantized weight lands in [-127, 127] without clamping.
    """
    q4 = np.asarray(q4, dtype=np.float64)
    s_wg = np.asarray(s_wg, dtype=np.float64)
    k = q4.shape[0]
    groups = s_wg.shape[0]
    if k % groups != 0:
        raise ShapeError("group scale rows do not divide code rows")
    gs = k // groups
    deq = f16_round_array(q4 * np.repeat(s_wg, gs, axis=0))
    m = np.abs(deq).max(axis=0)
    return np.where(m > 0.0, m / 127.0, 1.0)


def pack_i4(q4: np.ndarray) -> np.ndarray:
    """Pack INT4 codes two-per-byte: row 2k in the low nibble, 2k+1 in the high.

    Codes are stored biased (u = q + 8). Odd K is padded with the zero code;
    the true row count travels separately (QuantizedWeights.rows / checkpoint
    metadata).
    """
    q4 = np.asarray(q4)
    if q4.ndim != 2:
        raise ShapeError("codes must be 2-D (K x N)")
    if q4.size and (q4.min() < -8 or q4.max() > 7):
        raise DataError("INT4 codes out of [-8, 7]")
    k, n = q4.shape
    u = (q4.astype(np.int16) + 8).astype(np.uint8)
    if k % 2:
        u = np.vstack([u, np.full((1, n), 8, dtype=np.uint8)])
    lo = u[0::2, :]
    hi = u[1::2, :]
    return (lo | (hi << 4)).astype(np.uint8)


def unpack_i4(packed: np.ndarray, rows: int) -> np.ndarray:
    """Inverse of pack_i4; validates the padding nibble against the true K."""
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.ndim != 2:
        raise ShapeError("packed tensor must be 2-D")
    if packed.shape[0] != (rows + 1) // 2:
        raise CorruptionError(
            f"packed rows {packed.shape[0]} inconsistent with true K={rows}"
        )
    lo = (packed & 0x0F).astype(np.int16) - 8
    hi = (packed >> 4).astype(np.int16) - 8
    out = np.empty((2 * packed.shape[0], packed.shape[1]), dtype=np.int8)
    out[0::2, :] = lo
    out[1::2, :] = hi
    if rows % 2 and np.any(out[rows, :] != 0):
        raise CorruptionError("nonzero padding nibble for odd K")
    return out[:rows, :]


def dequantize_ref(qw: QuantizedWeights) -> np.ndarray:
    """Wide-precision dequantization; the oracle side of every GEMM comparison."""
    q = qw.codes().astype(np.float64)
    if qw.scheme == PER_CHANNEL:
        return q * qw.s_w[None, :]
    gs = qw.group_size
    return q * np.repeat(qw.s_wg, gs, axis=0)
