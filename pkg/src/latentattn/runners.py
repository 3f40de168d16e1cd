"""Uniform entry points for running any variant forward or streamed."""

from __future__ import annotations

import numpy as np

from .baselines import gqa_forward, mha_forward, mla_forward
from .cca import cca_forward
from .costmodel import AttnSpec
from .decode import decode_step, new_state, prefill
from .errors import UnknownVariant
from .ndcore import NdArray


def run_forward(spec: AttnSpec, w, x: NdArray, causal: bool) -> NdArray:
    if spec.variant == "mha":
        return mha_forward(x, w, causal)
    if spec.variant == "gqa":
        return gqa_forward(x, w, causal)
    if spec.variant == "mla":
        return mla_forward(x, w, causal)
    if spec.variant in ("cca", "ccgqa"):
        return cca_forward(x, w, w.params, causal)
    raise UnknownVariant(spec.variant)


def run_decode_loop(spec: AttnSpec, w, x: NdArray, mla_mode: str = "mqa"):
    """Feed ``x`` token by token from an empty state; stack the outputs."""
    state = new_state(spec.variant, w, x.shape[1], mla_mode)
    rows = []
    for t in range(x.shape[0]):
        rows.append(decode_step(state, NdArray(x.data[t:t + 1])).data)
    out = np.concatenate(rows, axis=0) if rows else np.zeros((0,) + x.shape[1:])
    return out, state


def run_prefill(spec: AttnSpec, w, x: NdArray, mla_mode: str = "mqa"):
    return prefill(x, w, spec.variant, mla_mode)
