"""Rotary embedding properties: identity at zero, norms, relative positions."""

import numpy as np
import pytest

from latentattn.errors import OddRotaryDim, ShapeMismatch
from latentattn.ndcore import NdArray
from latentattn.rope import RopeParams, rope_apply


def test_position_zero_is_identity():
    rng = np.random.default_rng(0)
    x = NdArray(rng.standard_normal((1, 2, 3, 8)))
    out = rope_apply(x, [0], RopeParams(rotary_dim=8))
    np.testing.assert_array_equal(out.data, x.data)


def test_unit_pair_rotates_to_cos_sin():
    p = RopeParams(rotary_dim=2)
    for pos in [1, 5, 17]:
        x = NdArray(np.array([1.0, 0.0]).reshape(1, 1, 1, 2))
        out = rope_apply(x, [pos], p).data.ravel()
        # pair frequency for the first (only) pair is theta_base^0 = 1
        np.testing.assert_allclose(out, [np.cos(pos), np.sin(pos)], atol=1e-12)


def test_norm_preserved():
    rng = np.random.default_rng(1)
    x = NdArray(rng.standard_normal((5, 2, 4, 16)))
    out = rope_apply(x, list(range(5)), RopeParams(rotary_dim=16))
    np.testing.assert_allclose(
        np.linalg.norm(out.data, axis=-1), np.linalg.norm(x.data, axis=-1), atol=1e-12
    )


def test_partial_rotation_passes_tail_through():
    rng = np.random.default_rng(2)
    x = NdArray(rng.standard_normal((3, 1, 2, 8)))
    out = rope_apply(x, [0, 1, 2], RopeParams(rotary_dim=4))
    np.testing.assert_array_equal(out.data[..., 4:], x.data[..., 4:])


def test_relative_position_property():
    rng = np.random.default_rng(3)
    p = RopeParams(rotary_dim=8)
    q = rng.standard_normal(8)
    k = rng.standard_normal(8)

    def dot_at(m, n):
        qm = rope_apply(NdArray(q.reshape(1, 1, 1, 8)), [m], p).data.ravel()
        kn = rope_apply(NdArray(k.reshape(1, 1, 1, 8)), [n], p).data.ravel()
        return float(qm @ kn)

    for m, n in [(3, 1), (10, 4), (7, 7)]:
        for shift in [1, 13, 100]:
            assert abs(dot_at(m, n) - dot_at(m + shift, n + shift)) < 1e-10


def test_decode_offsets_match_prefill_rows():
    rng = np.random.default_rng(4)
    p = RopeParams(rotary_dim=6)
    x = rng.standard_normal((7, 2, 3, 6))
    full = rope_apply(NdArray(x), list(range(7)), p).data
    for t in range(7):
        row = rope_apply(NdArray(x[t:t + 1]), [t], p).data
        np.testing.assert_allclose(row, full[t:t + 1], atol=1e-15)


def test_zero_rotary_dim_is_noop():
    x = NdArray(np.ones((2, 1, 1, 4)))
    out = rope_apply(x, [0, 1], RopeParams(rotary_dim=0))
    np.testing.assert_array_equal(out.data, x.data)


def test_odd_rotary_dim_rejected():
    with pytest.raises(OddRotaryDim):
        RopeParams(rotary_dim=3)


def test_position_count_must_match():
    x = NdArray(np.ones((3, 1, 1, 4)))
    with pytest.raises(ShapeMismatch):
        rope_apply(x, [0, 1], RopeParams(rotary_dim=4))
