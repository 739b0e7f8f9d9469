"""Two-stage quantization driver: smoothing, Hessian compensation, packing,
checkpoint I/O, and the toy-model evaluation harness.

Per layer, stage 1 picks a smoothing plan by threshold grid search and stage 2
runs the Hessian-compensated sweep on the smoothed weights, with the Hessian
built from the smoothed activations. Calibration activations for each layer
are taken from the partially quantized model (earlier layers already
quantized), so later layers see realistic error propagation; a flag switches
to full-precision calibration for ablations.

Smoothing is realized at inference by dividing the layer input by s before
activation quantization; this is mathematically identical to folding s into
the preceding operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint
from .errors import CalibrationError, ConfigError, DataError
from .gemm import FusedScales, w4a8_gemm_per_channel, w4a8_gemm_per_group
from .gptq import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_PERCDAMP,
    build_hessian,
    gptq_sweep,
    rtn_quantize,
)
from .numerics import f16_round_array, matmul_ref
from .quantize import (
    PER_CHANNEL,
    PER_GROUP,
    QuantSpec,
    QuantizedWeights,
    dequantize_ref,
    quant_act_per_token,
)
from .smoothing import SmoothingPlan, identity_plan, search_sigma, smoothing_objective
from .toy_model import ToyModel, gelu, layer_norm

__all__ = [
    "QuantizeOptions",
    "CalibrationSet",
    "QuantizedLayer",
    "quantize_layer",
    "quantize_model",
    "forward_fp",
    "forward_quant",
    "dequantized_forward",
    "apply_quant_linear",
    "synthetic_tokens",
    "eval_report",
    "DEFAULT_CALIB_TOKENS",
]

DEFAULT_CALIB_TOKENS = 512


@dataclass(frozen=True)
class QuantizeOptions:
    sigma_grid: int = 20
    percdamp: float = DEFAULT_PERCDAMP
    block_size: int = DEFAULT_BLOCK_SIZE
    smooth: bool = True
    gptq: bool = True
    calib_floor: int = 16
    fp_calibration: bool = False
    seed: int = 0


@dataclass
class CalibrationSet:
    """Per-layer activation samples captured during sequential quantization."""

    layers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def tokens(self) -> int:
        return next(iter(self.layers.values())).shape[0] if self.layers else 0


@dataclass
class QuantizedLayer:
    name: str
    qweights: QuantizedWeights
    plan: SmoothingPlan


def quantize_layer(
    w: np.ndarray,
    x_calib: np.ndarray,
    spec: QuantSpec,
    options: QuantizeOptions = QuantizeOptions(),
) -> tuple[QuantizedLayer, dict]:
    """Run both stages on one linear layer and report the ablation metrics.

    Metrics mirror the baseline / +smoothing / +smoothing+compensation
    ablation: each is the squared Frobenius error of the quantized product
    (int8 activations times dequantized weights) against the exact product.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x_calib, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise DataError("layer weights contain non-finite values")
    if not np.all(np.isfinite(x)):
        raise CalibrationError("calibration activations contain non-finite values")
    if not np.any(x):
        raise CalibrationError("all-zero calibration activations")

    k = w.shape[0]
    err_b = smoothing_objective(x, w, np.ones(k), spec)
    if options.smooth:
        plan = search_sigma(x, w, spec, grid_points=options.sigma_grid)
    else:
        plan = identity_plan(k, sigma=float(np.abs(x).max()) or 1.0, objective=err_b)
    s = plan.s

    w_s = w * s[:, None]
    if options.gptq:
        hstate = build_hessian(x / s[None, :], percdamp=options.percdamp)
        result = gptq_sweep(w_s, hstate, spec, block_size=options.block_size)
    else:
        result = rtn_quantize(w_s, spec)

    qa = quant_act_per_token(x / s[None, :])
    diff = matmul_ref(qa.dequantize(), dequantize_ref(result.qweights)) - matmul_ref(x, w)
    err_final = float(np.sum(diff * diff))

    layer = QuantizedLayer(name="", qweights=result.qweights, plan=plan)
    metrics = {
        "sigma": plan.sigma,
        "n_smoothed": plan.n_smoothed,
        "err_B": err_b,
        "err_AS": plan.objective,
        "err_AS_GPTQ": err_final,
    }
    return layer, metrics


def apply_quant_linear(x: np.ndarray, layer: QuantizedLayer) -> np.ndarray:
    """Quantized forward of one linear: divide by s, quantize, W4A8 GEMM."""
    qa = quant_act_per_token(np.asarray(x, dtype=np.float64) / layer.plan.s[None, :])
    fused = FusedScales.from_quantized(layer.qweights)
    if layer.qweights.scheme == PER_CHANNEL:
        out = w4a8_gemm_per_channel(qa, layer.qweights, fused)
    else:
        out = w4a8_gemm_per_group(qa, layer.qweights, fused)
    return out.y_wide()


def synthetic_tokens(seed: int, tokens: int, dim: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((tokens, dim))


def quantize_model(
    model: ToyModel,
    calib_x: np.ndarray,
    spec: QuantSpec,
    options: QuantizeOptions = QuantizeOptions(),
) -> tuple[Checkpoint, dict, CalibrationSet]:
    """Quantize every linear of the toy model in topological order.

    Returns the quantized checkpoint, the per-layer metrics report, and the
    calibration set that was captured along the way.
    """
    calib_x = np.asarray(calib_x, dtype=np.float64)
    if calib_x.shape[0] < options.calib_floor:
        raise CalibrationError(
            f"need >= {options.calib_floor} calibration tokens, got {calib_x.shape[0]}"
        )

    ckpt = Checkpoint(
        metadata={
            "kind": "qqq-quant",
            "model": {"dim": model.dim, "n_blocks": len(model.blocks)},
            "spec": {"scheme": spec.scheme, "group_size": spec.group_size},
            "options": {
                "sigma_grid": options.sigma_grid,
                "percdamp": options.percdamp,
                "smooth": options.smooth,
                "gptq": options.gptq,
                "fp_calibration": options.fp_calibration,
                "seed": options.seed,
            },
            "layers": {},
        }
    )
    report: dict = {"layers": {}}
    calib = CalibrationSet()

    x_q = calib_x  # propagated through quantized layers
    x_fp = calib_x
    for i, blk in enumerate(model.blocks):
        ckpt.add(f"block{i}.ln.gain", "f32", blk.ln_gain)

        h_q = layer_norm(x_q, blk.ln_gain)
        h_fp = layer_norm(x_fp, blk.ln_gain)
        name = f"block{i}.fc1"
        x_cal = h_fp if options.fp_calibration else h_q
        calib.layers[name] = x_cal
        layer1, met1 = quantize_layer(blk.w1, x_cal, spec, options)
        layer1.name = name
        _store_layer(ckpt, layer1)
        report["layers"][name] = met1

        a_q = gelu(apply_quant_linear(h_q, layer1))
        a_fp = gelu(h_fp @ blk.w1)
        name = f"block{i}.fc2"
        x_cal = a_fp if options.fp_calibration else a_q
        calib.layers[name] = x_cal
        layer2, met2 = quantize_layer(blk.w2, x_cal, spec, options)
        layer2.name = name
        _store_layer(ckpt, layer2)
        report["layers"][name] = met2

        x_q = apply_quant_linear(a_q, layer2)
        x_fp = a_fp @ blk.w2

    for key in ("err_B", "err_AS", "err_AS_GPTQ"):
        report[f"mean_{key}"] = float(
            np.mean([m[key] for m in report["layers"].values()])
        )
    return ckpt, report, calib


def _store_layer(ckpt: Checkpoint, layer: QuantizedLayer) -> None:
    qw = layer.qweights
    name = layer.name
    ckpt.add(f"{name}.q4", "i4p", qw.packed, rows=qw.rows)
    if qw.scheme == PER_CHANNEL:
        ckpt.add(f"{name}.s_w", "f32", qw.s_w)
    else:
        ckpt.add(f"{name}.s_wg", "f32", qw.s_wg)
        ckpt.add(f"{name}.s_wc", "f32", qw.s_wc)
    ckpt.metadata["layers"][name] = {
        "scheme": qw.scheme,
        "group_size": qw.group_size,
        "cols": qw.cols,
        "smoothing": {
            "sigma": layer.plan.sigma,
            "selected": list(layer.plan.selected),
            "s": [float(v) for v in layer.plan.s],
            "objective": layer.plan.objective,
        },
    }


def _load_layer(ckpt: Checkpoint, name: str) -> QuantizedLayer:
    meta = ckpt.metadata["layers"][name]
    packed = ckpt.tensors[f"{name}.q4"]
    scheme = meta["scheme"]
    if scheme == PER_CHANNEL:
        qw = QuantizedWeights(
            packed=packed.array,
            rows=packed.rows,
            cols=int(meta["cols"]),
            scheme=PER_CHANNEL,
            s_w=ckpt.tensors[f"{name}.s_w"].array.astype(np.float64),
        )
    else:
        qw = QuantizedWeights(
            packed=packed.array,
            rows=packed.rows,
            cols=int(meta["cols"]),
            scheme=PER_GROUP,
            group_size=int(meta["group_size"]),
            s_wg=ckpt.tensors[f"{name}.s_wg"].array.astype(np.float64),
            s_wc=ckpt.tensors[f"{name}.s_wc"].array.astype(np.float64),
        )
    sm = meta["smoothing"]
    plan = SmoothingPlan(
        sigma=float(sm["sigma"]),
        selected=tuple(int(t) for t in sm["selected"]),
        s=np.asarray(sm["s"], dtype=np.float64),
        objective=float(sm["objective"]),
    )
    return QuantizedLayer(name=name, qweights=qw, plan=plan)


def forward_fp(model: ToyModel, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def forward_quant(qckpt: Checkpoint, x: np.ndarray, engine: str) -> np.ndarray:
    """Forward through a quantized checkpoint with the requested GEMM engine."""
    meta = qckpt.metadata
    if meta.get("kind") != "qqq-quant":
        raise ConfigError("checkpoint does not hold a quantized model")
    scheme = meta["spec"]["scheme"]
    if engine != scheme:
        raise ConfigError(
            f"engine {engine!r} does not match checkpoint scheme {scheme!r}"
        )
    x = np.asarray(x, dtype=np.float64)
    n_blocks = int(meta["model"]["n_blocks"])
    for i in range(n_blocks):
        gain = qckpt.tensors[f"block{i}.ln.gain"].array.astype(np.float64)
        h = layer_norm(x, gain)
        h = gelu(apply_quant_linear(h, _load_layer(qckpt, f"block{i}.fc1")))
        x = apply_quant_linear(h, _load_layer(qckpt, f"block{i}.fc2"))
    return x


def _effective_weights(qw: QuantizedWeights) -> np.ndarray:
    """Wide-precision value of the weights the integer engine multiplies.

    Per-channel that is q4 * s_W. Per-group the engine requantizes to the INT8
    grid first, so the effective weight is round(q4 * s*_Wg) * s_Wc with the
    fused scale held at binary16 precision (computed arithmetically here, not
    through the bit tricks).
    """
    if qw.scheme == PER_CHANNEL:
        return dequantize_ref(qw)
    with np.errstate(over="ignore"):
        s_star = (qw.s_wg / qw.s_wc[None, :]).astype(np.float16).astype(np.float64)
    q = qw.codes().astype(np.float64)
    w8 = np.clip(np.rint(q * np.repeat(s_star, qw.group_size, axis=0)), -127, 127)
    return w8 * qw.s_wc[None, :]


def _dequant_linear(x: np.ndarray, layer: QuantizedLayer) -> np.ndarray:
    # Same quantized operands and the same binary16 layer output as the
    # integer path, but plain float arithmetic in between: no INT8 GEMM and
    # no bit-trick conversions. Emitting binary16 keeps downstream activation
    # quantization decisions comparable between the two paths.
    qa = quant_act_per_token(x / layer.plan.s[None, :])
    return f16_round_array(qa.dequantize() @ _effective_weights(layer.qweights))


def dequantized_forward(qckpt: Checkpoint, x: np.ndarray) -> np.ndarray:
    """Oracle forward: dequantize every quantized tensor, multiply in float64."""
    meta = qckpt.metadata
    if meta.get("kind") != "qqq-quant":
        raise ConfigError("checkpoint does not hold a quantized model")
    x = np.asarray(x, dtype=np.float64)
    for i in range(int(meta["model"]["n_blocks"])):
        gain = qckpt.tensors[f"block{i}.ln.gain"].array.astype(np.float64)
        h = layer_norm(x, gain)
        h = gelu(_dequant_linear(h, _load_layer(qckpt, f"block{i}.fc1")))
        x = _dequant_linear(h, _load_layer(qckpt, f"block{i}.fc2"))
    return x


def eval_report(fp_ckpt: Checkpoint, qckpt: Checkpoint, x: np.ndarray) -> dict:
    """Relative Frobenius error of the quantized forward against FP."""
    model = ToyModel.from_checkpoint(fp_ckpt)
    engine = qckpt.metadata["spec"]["scheme"]
    y_fp = forward_fp(model, x)
    y_q = forward_quant(qckpt, x, engine)
    denom = float(np.linalg.norm(y_fp)) or 1.0
    return {
        "engine": engine,
        "tokens": int(np.asarray(x).shape[0]),
        "rel_frobenius_error": float(np.linalg.norm(y_q - y_fp)) / denom,
    }
