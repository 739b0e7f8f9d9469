"""Walk through the three magic-number conversions behind the per-group GEMM.

Run: python3 demos/bit_tricks.py
"""

import numpy as np

from qqq.gemm import fast_f16_to_i8, fast_i4_to_f16, fast_i4_to_i8, fused_dequant_quant
from qqq.numerics import Binary16, encode_f16

print("INT4 -> INT8 is a nibble shift: q * 16")
for q in (-8, -1, 0, 7):
    print(f"  q={q:3d}  ->  {fast_i4_to_i8(q):4d}")

print()
print("INT4 -> FP16 ORs the biased nibble into the mantissa of 1024.0")
print("and subtracts 1032 = 1024 + 8 to undo both the alignment and the bias:")
for u in (0, 8, 15):
    assembled = Binary16(0x6400 | u)
    out = fast_i4_to_f16(u)
    print(
        f"  nibble {u:2d}: bits 0x{assembled.bits:04X} = {assembled.to_float():7.1f}"
        f"  - 1032 -> {out.to_float():5.1f}"
    )

print()
print("FP16 -> INT8 adds 1152 = 1024 + 128; the low mantissa byte is then the")
print("unsigned result, and XOR 0x80 flips it back to signed:")
for x in (-128.0, -0.5, 0.0, 1.5, 126.0):
    r = encode_f16(x + 1152.0)
    print(
        f"  x={x:7.1f}: {x:7.1f}+1152 = {r.to_float():7.1f}"
        f"  bits 0x{r.bits:04X}  low byte 0x{r.bits & 0xFF:02X}"
        f"  -> {fast_f16_to_i8(encode_f16(x)):4d}"
    )

print()
print("The fused dequant-requant folds the dequantize multiply and the magic")
print("add into one FP16 FMA. With s* = 42.34375 (a real fused scale):")
s = encode_f16(42.34375)
for u in (0, 3, 8, 11, 15):
    q = u - 8
    print(
        f"  nibble {u:2d} (q={q:3d}): fma(q, s*, 1152) -> INT8 {fused_dequant_quant(u, s):4d}"
        f"   (wide check: {np.clip(np.rint(q * s.to_float()), -127, 127):.0f})"
    )
