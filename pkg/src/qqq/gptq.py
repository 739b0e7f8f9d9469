"""Hessian-based quantization compensation (column-wise quantize-and-update).

The Hessian of the layer-wise squared error is H = 2 X^T X. Input dimensions
are processed in natural order; quantizing dimension i leaves an error that is
propagated into the not-yet-quantized dimensions through the rows of the
upper Cholesky factor of the damped inverse Hessian. Processing is blocked
(lazy trailing updates) and must match the unblocked sweep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import CalibrationError, NumericalError, ShapeError
from .numerics import matmul_ref
from .quantize import (
    PER_CHANNEL,
    PER_GROUP,
    QuantSpec,
    QuantizedWeights,
    dequantize_ref,
    pack_i4,
    quant_weight_per_channel,
    quant_weight_per_group,
    requant_scale,
)

__all__ = [
    "HessianState",
    "CompensationResult",
    "build_hessian",
    "damped_cholesky_inverse",
    "gptq_sweep",
    "rtn_quantize",
    "DEFAULT_PERCDAMP",
    "DEFAULT_BLOCK_SIZE",
]

DEFAULT_PERCDAMP = 0.01
DEFAULT_BLOCK_SIZE = 128


@dataclass
class HessianState:
    hessian: np.ndarray  # K x K, exactly symmetric
    damping: float
    chol_inv: np.ndarray  # upper factor U with U^T U = (H + damping*I)^{-1}
    dead: np.ndarray  # bool mask of dimensions with zero Hessian diagonal
    samples: np.ndarray  # calibration activations, kept for error reporting


@dataclass
class CompensationResult:
    qweights: QuantizedWeights
    layer_error: float  # ||X W - X deq(Q(W))||_F^2
    col_errors: np.ndarray  # per-input-dimension accumulated (w-q)^2 / d^2


def build_hessian(x: np.ndarray, percdamp: float = DEFAULT_PERCDAMP) -> HessianState:
    """Accumulate H = 2 X^T X in wide precision and factor its damped inverse.

    Dead dimensions (zero diagonal, i.e. the channel never fires in the
    calibration set) get their diagonal replaced by the damping term; the
    sweep forces their weights to zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("calibration matrix must be 2-D with >= 1 token")
    if not np.any(x):
        raise CalibrationError("all-zero calibration activations")
    m = x.T @ x
    h = m + m.T  # = 2 X^T X, and bit-exactly symmetric
    diag = np.diag(h).copy()
    lam = percdamp * float(diag.mean())
    dead = diag == 0.0
    if np.any(dead):
        h = h.copy()
        h[dead, dead] = lam
    u = damped_cholesky_inverse(h, lam)
    return HessianState(hessian=h, damping=lam, chol_inv=u, dead=dead, samples=x)


def damped_cholesky_inverse(h: np.ndarray, lam: float) -> np.ndarray:
    """Upper Cholesky factor U of (H + lam*I)^{-1}.

    The sweep reads [H^{-1}]_ii for the remaining dimension set as U[i,i]^2
    and the propagation row as U[i, i+1:]; this is the standard identity
    between the upper factor of the full inverse and the Schur-complemented
    inverses of the trailing submatrices.
    """
    h = np.asarray(h, dtype=np.float64)
    k = h.shape[0]
    hd = h + lam * np.eye(k)
    try:
        c, low = scipy.linalg.cho_factor(hd, lower=True)
        hinv = scipy.linalg.cho_solve((c, low), np.eye(k))
        u = np.linalg.cholesky(hinv).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "damped Hessian is not positive definite; increase percdamp"
        ) from exc
    return u


def _group_block(block_size: int, gs: int) -> int:
    # Block boundaries must coincide with group boundaries so group scales can
    # be recomputed from fully compensated rows.
    if block_size <= gs:
        return gs
    return (block_size // gs) * gs


def gptq_sweep(
    w: np.ndarray,
    hstate: HessianState,
    spec: QuantSpec,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> CompensationResult:
    """Quantize W (K x N) one input dimension at a time with error compensation.

    Per-channel scales are frozen from the original W before the sweep;
    per-group scales are recomputed at each group boundary from the current
    compensated weights. The nearest code on the active grid solves the
    per-dimension argmin, since the inverse-Hessian denominator is constant
    for a fixed dimension.
    """
    w_orig = np.asarray(w, dtype=np.float64)
    if w_orig.ndim != 2:
        raise ShapeError("weights must be 2-D (K x N)")
    k, n = w_orig.shape
    if hstate.hessian.shape != (k, k):
        raise ShapeError(
            f"Hessian size {hstate.hessian.shape} does not match K={k}"
        )
    if spec.scheme == PER_GROUP and k % spec.group_size != 0:
        raise ShapeError(f"group_size {spec.group_size} does not divide K={k}")

    u = hstate.chol_inv
    work = w_orig.copy()
    work[hstate.dead, :] = 0.0

    per_group = spec.scheme == PER_GROUP
    gs = spec.group_size if per_group else 0
    if per_group:
        block_size = _group_block(block_size, gs)
        s_wg = np.empty((k // gs, n), dtype=np.float64)
        scale_row = np.ones(n, dtype=np.float64)
    else:
        # Frozen grid: per-channel scales from the original (dead-zeroed) W.
        m = np.abs(work).max(axis=0)
        s_w = np.where(m > 0.0, m / 7.0, 1.0)
        scale_row = s_w

    codes = np.empty((k, n), dtype=np.int8)
    col_errors = np.zeros(k, dtype=np.float64)

    for i1 in range(0, k, block_size):
        i2 = min(i1 + block_size, k)
        wb = work[i1:i2, :].copy()
        eb = np.zeros((i2 - i1, n), dtype=np.float64)
        for i in range(i1, i2):
            j = i - i1
            if per_group and i % gs == 0:
                g = i // gs
                gm = np.abs(wb[j : j + gs, :]).max(axis=0)
                scale_row = np.where(gm > 0.0, gm / 7.0, 1.0)
                s_wg[g, :] = scale_row
            row = wb[j, :]
            q = np.clip(np.rint(row / scale_row), -8, 7)
            codes[i, :] = q.astype(np.int8)
            deq = q * scale_row
            d = u[i, i]
            err = (row - deq) / d
            col_errors[i] = float(np.sum(err * err))
            wb[j + 1 :, :] -= np.outer(u[i, i + 1 : i2], err)
            eb[j, :] = err
        work[i1:i2, :] = wb
        if i2 < k:
            work[i2:, :] -= u[i1:i2, i2:].T @ eb

    if per_group:
        qweights = QuantizedWeights(
            packed=pack_i4(codes),
            rows=k,
            cols=n,
            scheme=PER_GROUP,
            group_size=gs,
            s_wg=s_wg,
            s_wc=requant_scale(codes, s_wg),
        )
    else:
        qweights = QuantizedWeights(
            packed=pack_i4(codes),
            rows=k,
            cols=n,
            scheme=PER_CHANNEL,
            s_w=s_w,
        )
    layer_error = _layer_error(hstate.samples, w_orig, qweights)
    return CompensationResult(
        qweights=qweights, layer_error=layer_error, col_errors=col_errors
    )


def rtn_quantize(
    w: np.ndarray, spec: QuantSpec, hstate: Optional[HessianState] = None
) -> CompensationResult:
    """Round-to-nearest baseline with the same result type as gptq_sweep."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError("weights must be 2-D (K x N)")
    if spec.scheme == PER_CHANNEL:
        qweights = quant_weight_per_channel(w)
    else:
        qweights = quant_weight_per_group(w, spec)
    if hstate is not None:
        layer_error = _layer_error(hstate.samples, w, qweights)
    else:
        layer_error = float("nan")
    return CompensationResult(
        qweights=qweights,
        layer_error=layer_error,
        col_errors=np.zeros(w.shape[0], dtype=np.float64),
    )


def _layer_error(x: np.ndarray, w: np.ndarray, qweights: QuantizedWeights) -> float:
    diff = matmul_ref(x, w - dequantize_ref(qweights))
    return float(np.sum(diff * diff))
