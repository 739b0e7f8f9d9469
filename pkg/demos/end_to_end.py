"""Quantize the toy model end to end and evaluate both GEMM dataflows.

Run: python3 demos/end_to_end.py
"""

import os
import tempfile

import numpy as np

from qqq.checkpoint import read_checkpoint, write_checkpoint
from qqq.pipeline import (
    QuantizeOptions,
    eval_report,
    forward_fp,
    forward_quant,
    quantize_model,
    synthetic_tokens,
)
from qqq.quantize import QuantSpec
from qqq.toy_model import ToyModel

model = ToyModel.random(dim=64, n_blocks=2, seed=0)
calib = synthetic_tokens(1, 256, 64)
probe = synthetic_tokens(2, 32, 64)
y_fp = forward_fp(model, probe)

for spec in (QuantSpec("per-channel"), QuantSpec("per-group", 32)):
    label = spec.scheme + (f" g={spec.group_size}" if spec.scheme == "per-group" else "")
    print(f"=== {label} ===")

    for name, opts in (
        ("baseline (plain rounding)", QuantizeOptions(smooth=False, gptq=False)),
        ("+ smoothing", QuantizeOptions(gptq=False)),
        ("+ smoothing + compensation", QuantizeOptions()),
    ):
        ckpt, report, _ = quantize_model(model, calib, spec, opts)
        y_q = forward_quant(ckpt, probe, spec.scheme)
        rel = np.linalg.norm(y_q - y_fp) / np.linalg.norm(y_fp)
        print(
            f"  {name:28s} mean layer error {report['mean_err_AS_GPTQ']:8.2f}"
            f"   forward rel err {rel:.4f}"
        )

    # the checkpoint is the deployable artifact; prove it survives disk
    ckpt, _, _ = quantize_model(model, calib, spec)
    with tempfile.TemporaryDirectory() as d:
        fp_path = os.path.join(d, "fp.qqq")
        q_path = os.path.join(d, "quant.qqq")
        write_checkpoint(model.to_checkpoint(), fp_path)
        write_checkpoint(ckpt, q_path)
        rep = eval_report(read_checkpoint(fp_path), read_checkpoint(q_path), probe)
        size = os.path.getsize(q_path)
        print(f"  from disk: rel err {rep['rel_frobenius_error']:.4f}, file {size} bytes")
    print()
