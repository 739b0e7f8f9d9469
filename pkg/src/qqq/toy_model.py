"""Seeded feed-forward toy model used as the desk-scale evaluation target.

Each block is LayerNorm (gain only, no bias) -> Linear(d -> 4d) -> GELU ->
Linear(4d -> d). Weights live in float32 so they survive the checkpoint
round trip exactly; all forward arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .checkpoint import Checkpoint
from .errors import CheckpointFormatError, ShapeError

__all__ = ["ToyBlock", "ToyModel", "layer_norm", "gelu"]

LN_EPS = 1e-5


def layer_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain[None, :]


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


@dataclass
class ToyBlock:
    ln_gain: np.ndarray  # (d,)
    w1: np.ndarray  # (d, 4d)
    w2: np.ndarray  # (4d, d)


@dataclass
class ToyModel:
    dim: int
    blocks: list[ToyBlock]
    seed: int = 0

    @classmethod
    def random(cls, dim: int = 64, n_blocks: int = 2, seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        hidden = 4 * dim
        blocks = []
        for _ in range(n_blocks):
            gain = (1.0 + 0.1 * rng.standard_normal(dim)).astype(np.float32)
            w1 = (rng.standard_normal((dim, hidden)) / np.sqrt(dim)).astype(np.float32)
            w2 = (rng.standard_normal((hidden, dim)) / np.sqrt(hidden)).astype(np.float32)
            blocks.append(
                ToyBlock(
                    ln_gain=gain.astype(np.float64),
                    w1=w1.astype(np.float64),
                    w2=w2.astype(np.float64),
                )
            )
        return cls(dim=dim, blocks=blocks, seed=seed)

    def linear_names(self) -> list[str]:
        names = []
        for i in range(len(self.blocks)):
            names.extend([f"block{i}.fc1", f"block{i}.fc2"])
        return names

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Full-precision forward pass (float64 throughout)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"input must be tokens x {self.dim}")
        for blk in self.blocks:
            h = layer_norm(x, blk.ln_gain)
            h = gelu(h @ blk.w1)
            x = h @ blk.w2
        return x

    def to_checkpoint(self) -> Checkpoint:
        ckpt = Checkpoint(
            metadata={
                "kind": "qqq-fp",
                "model": {"dim": self.dim, "n_blocks": len(self.blocks)},
                "seed": self.seed,
            }
        )
        for i, blk in enumerate(self.blocks):
            ckpt.add(f"block{i}.ln.gain", "f32", blk.ln_gain)
            ckpt.add(f"block{i}.fc1.weight", "f32", blk.w1)
            ckpt.add(f"block{i}.fc2.weight", "f32", blk.w2)
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ToyModel":
        meta = ckpt.metadata
        if meta.get("kind") != "qqq-fp":
            raise CheckpointFormatError("checkpoint does not hold a full-precision toy model")
        dim = int(meta["model"]["dim"])
        n_blocks = int(meta["model"]["n_blocks"])
        blocks = []
        for i in range(n_blocks):
            blocks.append(
                ToyBlock(
                    ln_gain=ckpt.tensors[f"block{i}.ln.gain"].array.astype(np.float64),
                    w1=ckpt.tensors[f"block{i}.fc1.weight"].array.astype(np.float64),
                    w2=ckpt.tensors[f"block{i}.fc2.weight"].array.astype(np.float64),
                )
            )
        return cls(dim=dim, blocks=blocks, seed=int(meta.get("seed", 0)))
