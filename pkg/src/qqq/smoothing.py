"""Adaptive smoothing: threshold grid search over activation outlier channels.

A smoothing vector s divides activations channel-wise and multiplies the
matching weight rows, which is lossless before quantization. Only channels
whose absolute maximum reaches the threshold sigma are smoothed; their scale
is chosen so the smoothed channel maximum becomes exactly sigma. The
threshold itself is picked by exhaustive grid search on the quantized-product
squared error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .numerics import matmul_ref
from .quantize import (
    PER_CHANNEL,
    QuantSpec,
    dequantize_ref,
    quant_act_per_token,
    quant_weight_per_channel,
    quant_weight_per_group,
)

__all__ = [
    "SmoothingPlan",
    "channel_maxima",
    "select_outlier_channels",
    "smoothing_vector",
    "smoothing_objective",
    "search_sigma",
]


@dataclass(frozen=True)
class SmoothingPlan:
    """Chosen threshold, smoothed channel set, and the resulting vector s."""

    sigma: float
    selected: tuple[int, ...]
    s: np.ndarray  # float64, length K, 1.0 outside `selected`
    objective: float

    @property
    def n_smoothed(self) -> int:
        return len(self.selected)


def identity_plan(n_channels: int, sigma: float, objective: float) -> SmoothingPlan:
    return SmoothingPlan(
        sigma=sigma,
        selected=(),
        s=np.ones(n_channels, dtype=np.float64),
        objective=objective,
    )


def channel_maxima(x: np.ndarray) -> np.ndarray:
    """Per-channel absolute maxima over tokens."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("activations must be 2-D with at least one token")
    return np.abs(x).max(axis=0)


def select_outlier_channels(m: np.ndarray, sigma: float) -> tuple[int, ...]:
    """Channels whose maximum reaches the threshold (these get smoothed)."""
    if sigma <= 0:
        raise DataError("sigma must be positive")
    return tuple(int(t) for t in np.flatnonzero(np.asarray(m) >= sigma))


def smoothing_vector(
    m: np.ndarray, selected: tuple[int, ...], sigma: float
) -> np.ndarray:
    """s[t] = m[t]/sigma on selected channels (their max becomes sigma), else 1."""
    if sigma <= 0:
        raise DataError("sigma must be positive")
    s = np.ones(len(m), dtype=np.float64)
    idx = list(selected)
    if idx:
        s[idx] = np.asarray(m, dtype=np.float64)[idx] / sigma
    return s


def _quant_weights(w: np.ndarray, spec: QuantSpec):
    if spec.scheme == PER_CHANNEL:
        return quant_weight_per_channel(w)
    return quant_weight_per_group(w, spec)


def smoothing_objective(
    x: np.ndarray, w: np.ndarray, s: np.ndarray, spec: QuantSpec
) -> float:
    """Squared Frobenius error of the quantized product against the exact one.

    Both operands are quantized round-to-nearest (no Hessian compensation) and
    dequantized before the product; the exact product uses matmul_ref.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or s.shape != (x.shape[1],):
        raise ShapeError(
            f"inconsistent shapes: X {x.shape}, W {w.shape}, s {s.shape}"
        )
    return _objective_given_exact(x, w, s, spec, matmul_ref(x, w))


def _objective_given_exact(
    x: np.ndarray, w: np.ndarray, s: np.ndarray, spec: QuantSpec, exact: np.ndarray
) -> float:
    qa = quant_act_per_token(x / s[None, :])
    qw = _quant_weights(w * s[:, None], spec)
    diff = matmul_ref(qa.dequantize(), dequantize_ref(qw)) - exact
    return float(np.sum(diff * diff))


def search_sigma(
    x: np.ndarray, w: np.ndarray, spec: QuantSpec, grid_points: int = 20
) -> SmoothingPlan:
    """Exhaustive threshold search over sigma_i = (i/grid)*max|X|, i = 1..grid.

    The no-smoothing plan is always a candidate (it stands in for the
    degenerate sigma = 0 endpoint, which would divide by zero). Candidates are
    scanned from no-smoothing downward in sigma and replaced only on strict
    improvement, so ties resolve toward fewer smoothed channels.
    """
    if grid_points < 2:
        raise DataError("grid_points must be >= 2")
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    m = channel_maxima(x)
    xmax = float(m.max())
    k = x.shape[1]

    exact = matmul_ref(x, w)  # shared across candidates
    base_obj = _objective_given_exact(x, w, np.ones(k), spec, exact)
    if xmax == 0.0:
        return identity_plan(k, sigma=1.0, objective=base_obj)

    best = identity_plan(k, sigma=xmax, objective=base_obj)
    for i in range(grid_points, 0, -1):
        sigma = (i / grid_points) * xmax
        selected = select_outlier_channels(m, sigma)
        s = smoothing_vector(m, selected, sigma)
        obj = _objective_given_exact(x, w, s, spec, exact)
        if obj < best.objective:
            best = SmoothingPlan(
                sigma=sigma, selected=selected, s=s, objective=obj
            )
    return best
