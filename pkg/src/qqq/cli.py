"""Command-line interface: selftest, quantize, eval, gemm-bench, inspect."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time

import numpy as np

from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .errors import QQQError
from .gemm import (
    FusedScales,
    fast_f16_to_i8,
    fast_i4_to_f16,
    fast_i4_to_i8,
    w4a8_gemm_per_channel,
    w4a8_gemm_per_group,
)
from .numerics import Binary16, decode_f16, encode_f16
from .pipeline import (
    DEFAULT_CALIB_TOKENS,
    QuantizeOptions,
    eval_report,
    quantize_model,
    synthetic_tokens,
)
from .quantize import (
    PER_CHANNEL,
    QuantSpec,
    pack_i4,
    quant_act_per_token,
    quant_weight_per_channel,
    quant_weight_per_group,
    unpack_i4,
)
from .toy_model import ToyModel


def _selftest_checks():
    rng = np.random.default_rng(0)

    def roundtrip_all_patterns():
        bits = np.arange(65536, dtype=np.uint16)
        vals = bits.view(np.float16)
        not_nan = ~np.isnan(vals.astype(np.float64))
        back = vals[not_nan].astype(np.float64).astype(np.float16).view(np.uint16)
        return np.array_equal(back, bits[not_nan])

    def integer_exactness():
        n = np.arange(-2048, 2049, dtype=np.float64)
        return np.array_equal(n.astype(np.float16).astype(np.float64), n)

    def nibble_conversions():
        ok = all(fast_i4_to_f16(u).to_float() == u - 8 for u in range(16))
        return ok and all(fast_i4_to_i8(q) == 16 * q for q in range(-8, 8))

    def f16_to_i8_exhaustive():
        bits = np.arange(65536, dtype=np.uint16)
        vals = bits.view(np.float16).astype(np.float64)
        mask = np.isfinite(vals) & (vals >= -128.0) & (vals < 127.5)
        for b, v in zip(bits[mask], vals[mask]):
            if fast_f16_to_i8(Binary16(int(b))) != int(np.rint(v)):
                return False
        return True

    def pack_roundtrip():
        for k in (1, 2, 7, 64):
            q = rng.integers(-8, 8, size=(k, 9)).astype(np.int8)
            if not np.array_equal(unpack_i4(pack_i4(q), k), q):
                return False
        return True

    def checkpoint_roundtrip():
        ckpt = ToyModel.random(dim=16, n_blocks=1, seed=7).to_checkpoint()
        with tempfile.TemporaryDirectory() as d:
            p = os.path.join(d, "m.qqq")
            write_checkpoint(ckpt, p)
            first = open(p, "rb").read()
            again = read_checkpoint(p)
            p2 = os.path.join(d, "m2.qqq")
            write_checkpoint(again, p2)
            return again == ckpt and open(p2, "rb").read() == first

    return [
        ("binary16 round-trip (all 65536 patterns)", roundtrip_all_patterns),
        ("binary16 integer exactness [-2048, 2048]", integer_exactness),
        ("nibble conversions (16 codes, both tricks)", nibble_conversions),
        ("fast FP16->INT8 exhaustive in-range", f16_to_i8_exhaustive),
        ("INT4 pack/unpack round trip", pack_roundtrip),
        ("checkpoint byte-identical round trip", checkpoint_roundtrip),
    ]


def cmd_selftest(_args) -> int:
    failures = []
    for name, check in _selftest_checks():
        ok = check()
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)
    if failures:
        print(f"{len(failures)} check(s) failed: {', '.join(failures)}")
        return 1
    return 0


def _load_model(spec_str: str) -> ToyModel:
    if spec_str.startswith("synthetic:"):
        return ToyModel.random(seed=int(spec_str.split(":", 1)[1]))
    return ToyModel.from_checkpoint(read_checkpoint(spec_str))


def _load_calib(spec_str: str, dim: int) -> np.ndarray:
    if spec_str.startswith("synthetic:"):
        seed = int(spec_str.split(":", 1)[1])
        return synthetic_tokens(seed, DEFAULT_CALIB_TOKENS, dim)
    ckpt = read_checkpoint(spec_str)
    return ckpt.tensors["tokens"].array.astype(np.float64)


def cmd_quantize(args) -> int:
    model = _load_model(args.in_ckpt)
    calib = _load_calib(args.calib, model.dim)
    spec = QuantSpec(scheme=args.scheme, group_size=args.group_size)
    options = QuantizeOptions(
        sigma_grid=args.sigma_grid,
        percdamp=args.percdamp,
        smooth=not args.no_smooth,
        gptq=not args.no_gptq,
        seed=args.seed,
    )
    qckpt, report, _calib = quantize_model(model, calib, spec, options)
    write_checkpoint(qckpt, args.out)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    print(f"quantized {len(report['layers'])} layers -> {args.out}")
    print(
        "mean layer error: B={mean_err_B:.6g} AS={mean_err_AS:.6g} "
        "AS+GPTQ={mean_err_AS_GPTQ:.6g}".format(**report)
    )
    return 0


def cmd_eval(args) -> int:
    fp = read_checkpoint(args.fp)
    quant = read_checkpoint(args.quant)
    if not args.input.startswith("synthetic:"):
        raise QQQError("eval input must be synthetic:SEED")
    seed = int(args.input.split(":", 1)[1])
    dim = int(fp.metadata["model"]["dim"])
    x = synthetic_tokens(seed, DEFAULT_CALIB_TOKENS, dim)
    report = eval_report(fp, quant, x)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_gemm_bench(args) -> int:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.m, args.k))
    w = rng.standard_normal((args.k, args.n))
    aq = quant_act_per_token(x)
    if args.scheme == PER_CHANNEL:
        qw = quant_weight_per_channel(w)
        run = w4a8_gemm_per_channel
    else:
        qw = quant_weight_per_group(w, QuantSpec("per-group", args.group_size))
        run = w4a8_gemm_per_group
    fused = FusedScales.from_quantized(qw)
    run(aq, qw, fused)  # warm-up
    reps, elapsed = 0, 0.0
    while elapsed < 0.5:
        t0 = time.perf_counter()
        run(aq, qw, fused)
        elapsed += time.perf_counter() - t0
        reps += 1
    flops = 2.0 * args.m * args.n * args.k * reps / elapsed
    print(
        f"{args.scheme} W4A8 GEMM m={args.m} n={args.n} k={args.k}: "
        f"{reps / elapsed:.2f} gemm/s, {flops / 1e6:.1f} Mop/s (reference, informational)"
    )
    return 0


def cmd_inspect(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    index = {
        name: {
            "dtype": rec.dtype,
            "shape": list(rec.array.shape),
            **({"rows": rec.rows} if rec.rows is not None else {}),
        }
        for name, rec in ckpt.tensors.items()
    }
    print(json.dumps({"tensors": index, "metadata": ckpt.metadata}, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qqq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("selftest", help="run exhaustive conversion and round-trip suites")

    q = sub.add_parser("quantize", help="quantize a toy-model checkpoint")
    q.add_argument("--in", dest="in_ckpt", required=True, help="FP checkpoint or synthetic:SEED")
    q.add_argument("--calib", required=True, help="calibration checkpoint or synthetic:SEED")
    q.add_argument("--scheme", choices=["per-channel", "per-group"], default="per-channel")
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--sigma-grid", type=int, default=20)
    q.add_argument("--percdamp", type=float, default=0.01)
    q.add_argument("--no-smooth", action="store_true")
    q.add_argument("--no-gptq", action="store_true")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--report", default=None)

    e = sub.add_parser("eval", help="compare FP and quantized forward passes")
    e.add_argument("--fp", required=True)
    e.add_argument("--quant", required=True)
    e.add_argument("--input", required=True, help="synthetic:SEED")
    e.add_argument("--report", default=None)

    g = sub.add_parser("gemm-bench", help="reference GEMM throughput (informational)")
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--scheme", choices=["per-channel", "per-group"], default="per-channel")
    g.add_argument("--group-size", type=int, default=128)

    i = sub.add_parser("inspect", help="dump a checkpoint header as JSON")
    i.add_argument("ckpt")

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "selftest": cmd_selftest,
        "quantize": cmd_quantize,
        "eval": cmd_eval,
        "gemm-bench": cmd_gemm_bench,
        "inspect": cmd_inspect,
    }
    try:
        return handlers[args.command](args)
    except QQQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
