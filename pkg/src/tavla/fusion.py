"""Text-conditioned fusion of patch embeddings with token embeddings.

Given L2-normalized per-token text embeddings ``t`` (m, d) and per-patch
image embeddings ``v`` (B, n, d), fusion computes

    W = softmax(t @ v.T / tau)        row-stochastic over the n patches
    fused = W @ (v + PE)

so each text token gathers a convex combination of patch features, with a
fixed 2-d sin/cos positional code added to the values so the *location* of
the attended patches survives the averaging. ``tau`` is a learned temperature
clamped to [0.01, 100] after every optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 100.0


def sincos_pe_2d(grid: tuple[int, int], dim: int, base: float = 10000.0) -> np.ndarray:
    """Fixed 2-d positional code, (grid_h * grid_w, dim) float32.

    The first half of the channels encodes the row index, the second half the
    column index; each half interleaves sin/cos at geometrically spaced
    frequencies ``base**(-j / (dim/4))``. Patch order is row-major.
    """
    h, w = grid
    if dim % 4:
        raise ConfigError(f"positional code dim must be divisible by 4; got {dim}")
    quarter = dim // 4
    freqs = base ** (-np.arange(quarter) / quarter)  # (q,)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.empty((h * w, dim), dtype=np.float32)
    for idx, coord in enumerate((rows.reshape(-1), cols.reshape(-1))):
        angles = coord[:, None] * freqs[None, :]  # (n, q)
        half = np.empty((h * w, 2 * quarter))
        half[:, 0::2] = np.sin(angles)
        half[:, 1::2] = np.cos(angles)
        out[:, idx * 2 * quarter : (idx + 1) * 2 * quarter] = half
    return out


@dataclass
class FusionState:
    """Learned temperature plus the fixed positional table for one camera."""

    tau: Tensor
    pe: np.ndarray

    @classmethod
    def create(cls, grid: tuple[int, int], dim: int, tau_init: float = TAU_INIT) -> "FusionState":
        if tau_init < TAU_MIN or tau_init > TAU_MAX:
            raise ConfigError(f"tau init {tau_init} outside [{TAU_MIN}, {TAU_MAX}]")
        return cls(tau=T.parameter(np.float32(tau_init)), pe=sincos_pe_2d(grid, dim))


def fuse(
    text: Tensor,
    vision: Tensor,
    state: FusionState,
    pe: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Fuse patch features into per-token features.

    Args:
        text: (m, d) or (B, m, d) normalized token embeddings.
        vision: (B, n, d) normalized patch embeddings.
        state: temperature and positional table; ``pe`` overrides the table
            (used by tests that permute patch order).

    Returns:
        (fused, weights): fused is (B, m, d); weights is (B, m, n) with rows
        summing to 1.
    """
    if pe is None:
        pe = state.pe
    if text.shape[-1] != vision.shape[-1]:
        raise ShapeError(
            f"text dim {text.shape} does not match vision dim {vision.shape}"
        )
    n = vision.shape[-2]
    if pe.shape != (n, vision.shape[-1]):
        raise ShapeError(f"positional table {pe.shape} does not cover {n} patches")
    sim = T.matmul(text, T.swap_last(vision))  # (B, m, n)
    weights = T.softmax(T.div(sim, state.tau), axis=-1)
    values = T.add(vision, pe.astype(vision.dtype))
    fused = T.matmul(weights, values)
    return fused, weights


def clamp_tau(state: FusionState) -> None:
    """Project the temperature back into [TAU_MIN, TAU_MAX], in place."""
    np.clip(state.tau.data, TAU_MIN, TAU_MAX, out=state.tau.data)
