"""Rotary position embedding on per-head vectors.

Interleaved-pair layout: channel pairs (0,1), (2,3), ... of the first
``rotary_dim`` channels rotate by position-dependent angles; the rest pass
through. The rotation is orthogonal, so per-vector norms are preserved and
query/key dot products depend only on relative position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndcore
from .errors import OddRotaryDim, ShapeMismatch
from .ndcore import NdArray


@dataclass(frozen=True)
class RopeParams:
    """Rotation schedule: pair ``i`` spins at ``theta_base ** (-2i/rotary_dim)``."""

    rotary_dim: int
    theta_base: float = 10000.0

    def __post_init__(self):
        if self.rotary_dim % 2 != 0:
            raise OddRotaryDim(f"rotary_dim must be even, got {self.rotary_dim}")
        if self.rotary_dim < 0:
            raise ValueError("rotary_dim must be nonnegative")

    def frequencies(self) -> np.ndarray:
        m = self.rotary_dim // 2
        if m == 0:
            return np.zeros(0, dtype=ndcore.get_default_dtype())
        i = np.arange(m, dtype=ndcore.get_default_dtype())
        return self.theta_base ** (-2.0 * i / self.rotary_dim)


def rope_tables(positions: Sequence[int], p: RopeParams):
    """(cos, sin) tables shaped (S, 1, 1, rotary_dim/2) for an (S,B,H,D) array."""
    dt = ndcore.get_default_dtype()
    pos = np.asarray(list(positions), dtype=dt)
    angles = pos[:, None] * p.frequencies()[None, :]
    cos = np.cos(angles)[:, None, None, :].astype(dt)
    sin = np.sin(angles)[:, None, None, :].astype(dt)
    return cos, sin


def rope_apply(x: NdArray, positions: Sequence[int], p: RopeParams) -> NdArray:
    """Rotate the first ``rotary_dim`` channels of (S,B,H,D) head vectors.

    ``positions`` gives the absolute token index of each sequence row, so
    streaming decode can pass arbitrary offsets.
    """
    x = ndcore.as_array(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (S,B,H,D), got {x.shape}")
    if len(positions) != x.shape[0]:
        raise ShapeMismatch(
            f"{len(positions)} positions for {x.shape[0]} sequence rows"
        )
    if p.rotary_dim > x.shape[-1]:
        raise ShapeMismatch(
            f"rotary_dim {p.rotary_dim} exceeds head dim {x.shape[-1]}"
        )
    if p.rotary_dim == 0 or x.shape[0] == 0:
        return x
    cos, sin = rope_tables(positions, p)
    return ndcore.rotate_pairs(x, cos, sin)
