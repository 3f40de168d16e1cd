"""Shared head-splitting and masked-attention machinery.

All attention variants funnel through :func:`grouped_attention`, so the
grouped/broadcast semantics (and the FLOP scopes the cost model reads)
are defined in exactly one place.
"""

from __future__ import annotations

import numpy as np

from . import ndcore
from .errors import GroupMismatch, ShapeMismatch
from .ndcore import NdArray, flop_scope


def split_heads(x: NdArray, n_heads: int) -> NdArray:
    """(S,B,H*D) -> (S,B,H,D) with head-major channel blocks."""
    s, b, e = x.shape
    if e % n_heads != 0:
        raise GroupMismatch(f"{e} channels not divisible into {n_heads} heads")
    return ndcore.reshape(x, (s, b, n_heads, e // n_heads))


def merge_heads(x: NdArray) -> NdArray:
    """(S,B,H,D) -> (S,B,H*D)."""
    s, b, h, d = x.shape
    return ndcore.reshape(x, (s, b, h * d))


def to_bhsd(x: NdArray) -> NdArray:
    return ndcore.transpose(x, (1, 2, 0, 3))


def to_sbhd(x: NdArray) -> NdArray:
    return ndcore.transpose(x, (2, 0, 1, 3))


def causal_mask(s: int, sk: int, q_offset: int) -> NdArray:
    """Additive mask: query row i may see key j iff j <= i + q_offset."""
    i = np.arange(s)[:, None]
    j = np.arange(sk)[None, :]
    mask = np.where(j <= i + q_offset, 0.0, -np.inf)
    return NdArray(mask.astype(ndcore.get_default_dtype()))


def pair_scores(q: NdArray, k: NdArray) -> NdArray:
    """Raw dot-product scores (B,H,S,Sk) for (S,B,H,D)/(Sk,B,H,D) inputs."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"head dims differ: q {q.shape} vs k {k.shape}")
    return ndcore.matmul(to_bhsd(q), ndcore.transpose(k, (1, 2, 3, 0)))


def grouped_attention(
    q: NdArray,
    k: NdArray,
    v: NdArray,
    scale: float,
    causal: bool,
    extra_scores: NdArray | None = None,
    q_offset: int = 0,
) -> NdArray:
    """Softmax attention with kv heads broadcast over query-head groups.

    ``q`` is (S,B,Hq,D); ``k``/``v`` are (Sk,B,Hk,*) with Hq a multiple of
    Hk — each kv head serves Hq/Hk consecutive query heads. ``extra_scores``
    (B,Hq,S,Sk) is added to the logits before masking, which lets callers
    keep separately-projected score contributions (e.g. dedicated rotary
    heads) in their own FLOP scope. ``q_offset`` is the number of cached
    positions preceding the first query row, so streaming steps mask
    correctly against a longer key axis.
    """
    hq, hk = q.shape[2], k.shape[2]
    if hq % hk != 0:
        raise GroupMismatch(f"{hq} query heads not divisible by {hk} kv heads")
    group = hq // hk
    if group > 1:
        k = ndcore.repeat_heads(k, group, axis=2)
        v = ndcore.repeat_heads(v, group, axis=2)
    with flop_scope("attention"):
        scores = pair_scores(q, k)
    if extra_scores is not None:
        scores = ndcore.add(scores, extra_scores)
    if causal:
        scores = ndcore.add(scores, causal_mask(q.shape[0], k.shape[0], q_offset))
    weights = ndcore.softmax_rows(scores, scale)
    with flop_scope("attention"):
        out = ndcore.matmul(weights, to_bhsd(v))
    return to_sbhd(out)
