"""MHA/GQA/MLA forwards against unvectorized loop oracles and identities."""

import math

import numpy as np
import pytest

from _helpers import max_rel_err
from latentattn.baselines import (
    GqaParams,
    MhaParams,
    MlaParams,
    WeightSet,
    expected_shapes,
    gqa_forward,
    init_weights,
    mha_forward,
    mla_absorbed_forward,
    mla_forward,
    mla_merge_projections,
)
from latentattn.errors import MissingWeight, ShapeMismatch, UnexpectedWeight
from latentattn.ndcore import NdArray


def naive_softmax(row):
    row = row - row.max()
    e = np.exp(row)
    return e / e.sum()


def naive_attention_head(q, k, v, scale, causal):
    """One head, one batch: q (S,D), k (S,D), v (S,Dv) -> (S,Dv)."""
    s = q.shape[0]
    out = np.zeros((s, v.shape[1]))
    for i in range(s):
        scores = np.array([q[i] @ k[j] * scale for j in range(s)])
        if causal:
            scores[i + 1:] = -np.inf
        w = naive_softmax(scores)
        out[i] = sum(w[j] * v[j] for j in range(s))
    return out


def naive_mha(x, wq, wk, wv, wo, n_h, causal):
    s, b, e = x.shape
    d = e // n_h
    out = np.zeros((s, b, e))
    for bi in range(b):
        xb = x[:, bi, :]
        q, k, v = xb @ wq, xb @ wk, xb @ wv
        heads = []
        for h in range(n_h):
            sl = slice(h * d, (h + 1) * d)
            heads.append(naive_attention_head(q[:, sl], k[:, sl], v[:, sl],
                                              1.0 / math.sqrt(d), causal))
        out[:, bi, :] = np.concatenate(heads, axis=1) @ wo
    return out


def naive_rope(vec, pos, base=10000.0):
    """Interleaved-pair rotation of a full vector at one position."""
    d = vec.shape[0]
    out = vec.copy()
    for i in range(d // 2):
        freq = base ** (-2.0 * i / d)
        c, s = np.cos(pos * freq), np.sin(pos * freq)
        a, b = vec[2 * i], vec[2 * i + 1]
        out[2 * i] = a * c - b * s
        out[2 * i + 1] = a * s + b * c
    return out


class TestMha:
    def test_single_token_is_value_row(self):
        p = MhaParams(e=8, n_h=2)
        w = init_weights("mha", p, seed=0)
        rng = np.random.default_rng(1)
        x = NdArray(rng.standard_normal((1, 2, 8)))
        out = mha_forward(x, w, causal=True)
        want = (x.data @ w["w_v"].data) @ w["w_o"].data
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_identical_tokens_identical_outputs(self):
        p = MhaParams(e=8, n_h=4)
        w = init_weights("mha", p, seed=2)
        rng = np.random.default_rng(3)
        row = rng.standard_normal((1, 1, 8))
        x = NdArray(np.tile(row, (6, 1, 1)))
        out = mha_forward(x, w, causal=True).data
        for t in range(6):
            np.testing.assert_allclose(out[t], out[0], atol=1e-12)

    @pytest.mark.parametrize("causal", [True, False])
    def test_matches_loop_oracle(self, causal):
        p = MhaParams(e=8, n_h=2)
        w = init_weights("mha", p, seed=4)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((5, 2, 8))
        got = mha_forward(NdArray(x), w, causal=causal).data
        want = naive_mha(
            x, w["w_q"].data, w["w_k"].data, w["w_v"].data, w["w_o"].data,
            p.n_h, causal,
        )
        assert max_rel_err(got, want) < 1e-12

    def test_causality(self):
        p = MhaParams(e=8, n_h=2)
        w = init_weights("mha", p, seed=6)
        rng = np.random.default_rng(7)
        x = rng.standard_normal((7, 1, 8))
        base = mha_forward(NdArray(x), w, causal=True).data
        xp = x.copy()
        xp[4:] += rng.standard_normal((3, 1, 8))
        pert = mha_forward(NdArray(xp), w, causal=True).data
        np.testing.assert_allclose(pert[:4], base[:4], atol=1e-12)


class TestGqa:
    def test_full_groups_bitwise_equals_mha(self):
        mp = MhaParams(e=12, n_h=3)
        mw = init_weights("mha", mp, seed=8)
        gp = GqaParams(e=12, n_h=3, n_kv_groups=3)
        gw = WeightSet("gqa", gp, dict(mw.arrays))
        rng = np.random.default_rng(9)
        x = NdArray(rng.standard_normal((4, 2, 12)))
        np.testing.assert_array_equal(
            gqa_forward(x, gw, causal=True).data, mha_forward(x, mw, causal=True).data
        )

    def test_single_group_matches_replication_oracle(self):
        p = GqaParams(e=8, n_h=4, n_kv_groups=1)
        w = init_weights("gqa", p, seed=10)
        rng = np.random.default_rng(11)
        x = rng.standard_normal((5, 1, 8))
        got = gqa_forward(NdArray(x), w, causal=True).data
        # oracle: replicate the single kv head across all query heads
        wk_rep = np.tile(w["w_k"].data, (1, p.n_h))
        wv_rep = np.tile(w["w_v"].data, (1, p.n_h))
        want = naive_mha(x, w["w_q"].data, wk_rep, wv_rep, w["w_o"].data, p.n_h, True)
        assert max_rel_err(got, want) < 1e-12

    def test_mid_grouping_matches_replication_oracle(self):
        p = GqaParams(e=12, n_h=6, n_kv_groups=2)
        w = init_weights("gqa", p, seed=12)
        rng = np.random.default_rng(13)
        x = rng.standard_normal((4, 2, 12))
        got = gqa_forward(NdArray(x), w, causal=False).data
        d = p.d
        group = p.n_h // p.n_kv_groups
        wk = w["w_k"].data
        wv = w["w_v"].data
        wk_rep = np.concatenate(
            [np.tile(wk[:, g * d:(g + 1) * d], (1, group)) for g in range(p.n_kv_groups)],
            axis=1,
        )
        wv_rep = np.concatenate(
            [np.tile(wv[:, g * d:(g + 1) * d], (1, group)) for g in range(p.n_kv_groups)],
            axis=1,
        )
        want = naive_mha(x, w["w_q"].data, wk_rep, wv_rep, w["w_o"].data, p.n_h, False)
        assert max_rel_err(got, want) < 1e-12


def naive_mla(x, w, p, causal):
    """Independent full-head MLA evaluation with explicit head concat."""
    s, b, e = x.shape
    d, er = p.d, p.rope_dim
    scale = 1.0 / math.sqrt(d + er)
    out = np.zeros((s, b, e))
    for bi in range(b):
        xb = x[:, bi, :]
        c_q = xb @ w["w_dq"].data
        c_kv = xb @ w["w_dkv"].data
        q = c_q @ w["w_uq"].data
        k = c_kv @ w["w_uk"].data
        v = c_kv @ w["w_uv"].data
        if er > 0:
            q_r = c_q @ w["w_uqr"].data
            k_r = xb @ w["w_kr"].data
            q_r = np.stack([
                np.concatenate([
                    naive_rope(q_r[t, h * er:(h + 1) * er], t) for h in range(p.n_h)
                ]) for t in range(s)
            ])
            k_r = np.stack([naive_rope(k_r[t], t) for t in range(s)])
        heads = []
        for h in range(p.n_h):
            sl = slice(h * d, (h + 1) * d)
            qh, kh = q[:, sl], k[:, sl]
            if er > 0:
                rsl = slice(h * er, (h + 1) * er)
                qh = np.concatenate([qh, q_r[:, rsl]], axis=1)
                kh = np.concatenate([kh, k_r], axis=1)
            heads.append(naive_attention_head(qh, kh, v[:, sl], scale, causal))
        out[:, bi, :] = np.concatenate(heads, axis=1) @ w["w_o"].data
    return out


class TestMla:
    def test_matches_loop_oracle_nope(self):
        p = MlaParams(e=12, n_h=3, c_q=2, c_kv=3, rope_dim=0)
        w = init_weights("mla", p, seed=14)
        rng = np.random.default_rng(15)
        x = rng.standard_normal((5, 2, 12))
        got = mla_forward(NdArray(x), w, causal=True).data
        assert max_rel_err(got, naive_mla(x, w, p, True)) < 1e-12

    def test_matches_loop_oracle_with_rope_heads(self):
        p = MlaParams(e=12, n_h=3, c_q=2, c_kv=3, rope_dim=2)
        w = init_weights("mla", p, seed=16)
        rng = np.random.default_rng(17)
        x = rng.standard_normal((4, 2, 12))
        got = mla_forward(NdArray(x), w, causal=True).data
        assert max_rel_err(got, naive_mla(x, w, p, True)) < 1e-12

    def test_no_compression_identity_reduces_to_mha(self):
        e, n_h = 8, 2
        mp = MhaParams(e=e, n_h=n_h)
        mw = init_weights("mha", mp, seed=18)
        p = MlaParams(e=e, n_h=n_h, c_q=1, c_kv=1, rope_dim=0)
        eye = NdArray(np.eye(e))
        w = WeightSet("mla", p, {
            "w_dq": mw["w_q"], "w_uq": eye,
            "w_dkv": eye, "w_uk": mw["w_k"], "w_uv": mw["w_v"],
            "w_o": mw["w_o"],
        })
        rng = np.random.default_rng(19)
        x = NdArray(rng.standard_normal((5, 1, e)))
        got = mla_forward(x, w, causal=True).data
        want = mha_forward(x, mw, causal=True).data
        assert max_rel_err(got, want) < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_absorbed_equals_full_nope(self, seed):
        p = MlaParams(e=16, n_h=4, c_q=2, c_kv=4, rope_dim=0)
        w = init_weights("mla", p, seed=seed)
        mw = mla_merge_projections(w)
        rng = np.random.default_rng(seed + 100)
        x = NdArray(rng.standard_normal((6, 2, 16)))
        full = mla_forward(x, w, causal=True).data
        absorbed = mla_absorbed_forward(x, mw, causal=True).data
        assert max_rel_err(full, absorbed) < 1e-10

    def test_absorbed_equals_full_with_rope(self):
        p = MlaParams(e=16, n_h=2, c_q=2, c_kv=2, rope_dim=4)
        w = init_weights("mla", p, seed=20)
        mw = mla_merge_projections(w)
        rng = np.random.default_rng(21)
        x = NdArray(rng.standard_normal((5, 1, 16)))
        assert max_rel_err(
            mla_forward(x, w, causal=True).data,
            mla_absorbed_forward(x, mw, causal=True).data,
        ) < 1e-10

    def test_merge_identity_absorption(self):
        # single head, identity up-projections: merged maps are the other factor
        e = 6
        p = MlaParams(e=e, n_h=1, c_q=1, c_kv=1, rope_dim=0)
        rng = np.random.default_rng(22)
        w_uk = rng.standard_normal((e, e))
        w_uv = rng.standard_normal((e, e))
        w = WeightSet("mla", p, {
            "w_dq": NdArray(rng.standard_normal((e, e))),
            "w_dkv": NdArray(rng.standard_normal((e, e))),
            "w_uq": NdArray(np.eye(e)),
            "w_uk": NdArray(w_uk),
            "w_uv": NdArray(w_uv),
            "w_o": NdArray(np.eye(e)),
        })
        mw = mla_merge_projections(w)
        np.testing.assert_allclose(mw["w_q_merged"].data, w_uk.T, atol=1e-14)
        np.testing.assert_allclose(mw["w_o_merged"].data, w_uv, atol=1e-14)

    def test_causality(self):
        p = MlaParams(e=12, n_h=3, c_q=2, c_kv=3, rope_dim=2)
        w = init_weights("mla", p, seed=23)
        rng = np.random.default_rng(24)
        x = rng.standard_normal((8, 1, 12))
        base = mla_forward(NdArray(x), w, causal=True).data
        xp = x.copy()
        xp[5:] += 10.0
        pert = mla_forward(NdArray(xp), w, causal=True).data
        np.testing.assert_allclose(pert[:5], base[:5], atol=1e-12)


class TestParamCounts:
    def test_mha_count(self):
        e = 32
        w = init_weights("mha", MhaParams(e=e, n_h=4), seed=0)
        assert w.param_counts()["projection"] == 4 * e * e

    def test_gqa_count_uses_sharing_factor(self):
        e, n_h, groups = 32, 8, 2
        p = GqaParams(e=e, n_h=n_h, n_kv_groups=groups)
        w = init_weights("gqa", p, seed=0)
        assert w.param_counts()["projection"] == 2 * e * e + 2 * e * e // p.sharing

    def test_mla_count_with_separate_rope_bucket(self):
        e, n_h, c_q, c_kv, er = 32, 4, 2, 4, 4
        p = MlaParams(e=e, n_h=n_h, c_q=c_q, c_kv=c_kv, rope_dim=er)
        w = init_weights("mla", p, seed=0)
        counts = w.param_counts()
        assert counts["projection"] == e * e + 3 * e * e // c_kv + 2 * e * e // c_q
        assert counts["rope_projection"] == (e // c_q) * n_h * er + e * er


class TestWeightSetValidation:
    def test_missing_weight(self):
        p = MhaParams(e=4, n_h=2)
        shapes = expected_shapes("mha", p)
        arrays = {k: NdArray(np.zeros(v)) for k, v in shapes.items()}
        del arrays["w_v"]
        with pytest.raises(MissingWeight):
            WeightSet("mha", p, arrays)

    def test_wrong_shape(self):
        p = MhaParams(e=4, n_h=2)
        shapes = expected_shapes("mha", p)
        arrays = {k: NdArray(np.zeros(v)) for k, v in shapes.items()}
        arrays["w_q"] = NdArray(np.zeros((4, 5)))
        with pytest.raises(ShapeMismatch):
            WeightSet("mha", p, arrays)

    def test_unexpected_extra(self):
        p = MhaParams(e=4, n_h=2)
        shapes = expected_shapes("mha", p)
        arrays = {k: NdArray(np.zeros(v)) for k, v in shapes.items()}
        arrays["w_bogus"] = NdArray(np.zeros((2, 2)))
        with pytest.raises(UnexpectedWeight):
            WeightSet("mha", p, arrays)
