"""Bit-exact CPU reference of the two W4A8 GEMM dataflows.

Per-channel path: INT4 codes are shifted into the upper nibble of an INT8
(multiply by 16), the INT8 GEMM accumulates in INT32, and the dequant epilogue
uses a weight scale pre-divided by 16 so the shift cancels exactly.

Per-group path: INT4 codes are converted to FP16 by magic-number assembly
(OR into the mantissa of 1024, subtract 1032), rescaled into the INT8 grid by
a single FP16 FMA with the fused scale and the magic addend 1152 = 1024 + 128,
and the INT8 code is recovered from the low 8 mantissa bits XOR 0x80. The
INT32 accumulator is then dequantized with the per-channel requant scale.

Every step is modeled at the bit level so results match a real kernel
bit-for-bit; the dequant epilogue computes (acc * s_A) * s_W in float64 with
one final rounding to binary16.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, CorruptionError, ShapeError
from .numerics import Binary16, encode_f16
from .quantize import PER_CHANNEL, PER_GROUP, QuantizedActivations, QuantizedWeights

__all__ = [
    "MAGIC_ADDEND",
    "FusedScales",
    "GemmOutput",
    "fast_i4_to_i8",
    "fast_i4_to_f16",
    "fast_f16_to_i8",
    "fused_dequant_quant",
    "gemm_i8_i32",
    "w4a8_gemm_per_channel",
    "w4a8_gemm_per_group",
]

# 1024 aligns an 8-bit integer in the low mantissa bits; 128 biases signed to
# unsigned. Their sum is the FMA addend of the FP16 -> INT8 conversion.
MAGIC_ADDEND = 1152.0
_MAGIC_BITS_LO = 0x6400  # binary16(1024.0)
_MAGIC_BITS_HI = 0x6800  # binary16(2048.0); alignment holds in [1024, 2048)
_SIGNED_BITS_HI = 0x6500  # binary16(1280.0); low byte is a signed INT8 below it

_MAX_GEMM_K = 1 << 16  # |acc| <= K * 127 * 128 stays inside INT32


@dataclass(frozen=True)
class FusedScales:
    """Offline-prepared epilogue scales for one GEMM dataflow."""

    scheme: str
    s_w_folded: Optional[np.ndarray] = None  # per-channel: s_W / 16, length N
    s_star: Optional[np.ndarray] = None  # per-group: float16 s_Wg / s_Wc, G x N
    s_wc: Optional[np.ndarray] = None  # per-group: requant scales, length N

    @classmethod
    def from_quantized(cls, qw: QuantizedWeights) -> "FusedScales":
        if qw.scheme == PER_CHANNEL:
            return cls(scheme=PER_CHANNEL, s_w_folded=qw.s_w / 16.0)
        with np.errstate(over="ignore"):
            s_star = (qw.s_wg / qw.s_wc[None, :]).astype(np.float16)
        if not np.all(np.isfinite(s_star.astype(np.float64))):
            raise ConfigError("fused per-group scale overflows binary16")
        return cls(scheme=PER_GROUP, s_star=s_star, s_wc=qw.s_wc.copy())


@dataclass
class GemmOutput:
    y: np.ndarray  # float16, tokens x N
    acc: np.ndarray  # int32, tokens x N (kept for white-box tests)

    def y_wide(self) -> np.ndarray:
        return self.y.astype(np.float64)


def fast_i4_to_i8(q: int) -> int:
    """Shift an INT4 code into the upper nibble of an INT8: q * 16."""
    if not -8 <= q <= 7:
        raise CorruptionError(f"INT4 code out of range: {q}")
    return q * 16


def fast_i4_to_f16(u: int) -> Binary16:
    """Magic-number nibble-to-FP16: OR into 1024's mantissa, subtract 1032.

    The nibble is biased storage (q = u - 8); the result is exactly q.
    """
    if not 0 <= u <= 15:
        raise CorruptionError(f"nibble out of range: {u}")
    assembled = Binary16(_MAGIC_BITS_LO | u)  # value 1024 + u
    return encode_f16(assembled.to_float() - 1032.0)


def fast_f16_to_i8(x: Binary16) -> int:
    """Magic-number FP16 -> INT8: add 1152, take the low mantissa byte, XOR 0x80.

    Valid for decode(x) in [-128.0, 127.5); equals round-half-even(decode(x))
    there. Callers clamp before conversion (see fused_dequant_quant).
    """
    r = encode_f16(x.to_float() + MAGIC_ADDEND)  # FMA with multiplicand 1.0
    b = (r.bits & 0xFF) ^ 0x80
    return b - 256 if b >= 128 else b


def fused_dequant_quant(u: int, s_star: Binary16) -> int:
    """Dequantize an INT4 nibble and requantize to INT8 in one FP16 FMA.

    Computes fma(fast_i4_to_f16(u), s_star, 1152) with a single rounding, then
    extracts the INT8 code from the bit pattern. Out-of-range products clamp
    to [-127, 127].
    """
    w = fast_i4_to_f16(u)
    sval = s_star.to_float()
    if not np.isfinite(sval) or sval <= 0.0:
        raise ConfigError(f"fused scale must be positive and finite: {sval}")
    prod = w.to_float() * sval  # exact in float64
    r = encode_f16(prod + MAGIC_ADDEND)  # the single FMA rounding
    if _MAGIC_BITS_LO <= r.bits < _SIGNED_BITS_HI:
        b = (r.bits & 0xFF) ^ 0x80
        out = b - 256 if b >= 128 else b
        return max(out, -127)
    return 127 if prod > 0 else -127


def _fused_dequant_quant_cols(
    q4: np.ndarray, s_star: np.ndarray, group_size: int
) -> np.ndarray:
    """Vectorized fused_dequant_quant over a K x N code tensor."""
    s64 = np.repeat(s_star.astype(np.float64), group_size, axis=0)
    prod = q4.astype(np.float64) * s64
    r16 = (prod + MAGIC_ADDEND).astype(np.float16)  # single rounding: the sum
    bits = r16.view(np.uint16)  # is exact in float64
    aligned = (bits >= _MAGIC_BITS_LO) & (bits < _SIGNED_BITS_HI)
    w8 = ((bits & 0xFF) ^ 0x80).astype(np.uint8).view(np.int8).astype(np.int16)
    w8 = np.maximum(w8, -127)
    w8 = np.where(aligned, w8, np.where(prod > 0, 127, -127))
    return w8.astype(np.int8)


def gemm_i8_i32(aq: np.ndarray, w8: np.ndarray) -> np.ndarray:
    """Exact INT8 x INT8 -> INT32 matrix multiply."""
    aq = np.asarray(aq)
    w8 = np.asarray(w8)
    if aq.ndim != 2 or w8.ndim != 2 or aq.shape[1] != w8.shape[0]:
        raise ShapeError(f"inner dimensions differ: {aq.shape} x {w8.shape}")
    if aq.shape[1] > _MAX_GEMM_K:
        raise ShapeError(f"K={aq.shape[1]} risks INT32 accumulator overflow")
    acc = aq.astype(np.int64) @ w8.astype(np.int64)
    return acc.astype(np.int32)


def _check_gemm_operands(
    aq: QuantizedActivations, qw: QuantizedWeights, fused: FusedScales, scheme: str
) -> None:
    if qw.scheme != scheme or fused.scheme != scheme:
        raise ConfigError(
            f"engine expects {scheme} operands, got weights={qw.scheme!r} "
            f"scales={fused.scheme!r}"
        )
    if aq.q.shape[1] != qw.rows:
        raise ShapeError(
            f"activation K={aq.q.shape[1]} does not match weight K={qw.rows}"
        )
    if aq.s_a.shape != (aq.q.shape[0],):
        raise ShapeError("per-token scale length does not match token count")


def w4a8_gemm_per_channel(
    aq: QuantizedActivations, qw: QuantizedWeights, fused: FusedScales
) -> GemmOutput:
    """Per-channel dataflow: x16 shift, INT8 GEMM, dequant with s_W/16."""
    _check_gemm_operands(aq, qw, fused, PER_CHANNEL)
    if fused.s_w_folded.shape != (qw.cols,):
        raise ShapeError("folded scale length does not match N")
    w8 = qw.codes().astype(np.int16) * 16
    acc = gemm_i8_i32(aq.q, w8)
    y64 = (acc.astype(np.float64) * aq.s_a[:, None]) * fused.s_w_folded[None, :]
    with np.errstate(over="ignore"):
        y = y64.astype(np.float16)
    return GemmOutput(y=y, acc=acc)


def w4a8_gemm_per_group(
    aq: QuantizedActivations, qw: QuantizedWeights, fused: FusedScales
) -> GemmOutput:
    """Per-group dataflow: FusedDequantQuant to INT8, INT8 GEMM, dequant with s_Wc."""
    _check_gemm_operands(aq, qw, fused, PER_GROUP)
    if qw.rows % qw.group_size != 0 or fused.s_star.shape != (
        qw.rows // qw.group_size,
        qw.cols,
    ):
        raise ConfigError("fused group scales do not match the group structure")
    w8 = _fused_dequant_quant_cols(qw.codes(), fused.s_star, qw.group_size)
    acc = gemm_i8_i32(aq.q, w8)
    y64 = (acc.astype(np.float64) * aq.s_a[:, None]) * fused.s_wc[None, :]
    with np.errstate(over="ignore"):
        y = y64.astype(np.float16)
    return GemmOutput(y=y, acc=acc)
