import numpy as np
import pytest

from mexfuse.fusion import (
    FusionParams,
    attention,
    cascade_attention,
    mex_attention,
    profile,
    st_pool,
)
from mexfuse.tensor import DimensionError, Tensor, fresh_context


# ---- independent straight-from-formula oracles -----------------------------


def oracle_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def oracle_attention(q, k, v):
    return oracle_softmax(q @ k.T / np.sqrt(q.shape[1])) @ v


def apply_linear(lin, x):
    return x @ lin.w.data + lin.bias.data


def oracle_mex(fI, fT, fP, params):
    L = params.linears
    if params.per_pair:
        q_it, k_it = apply_linear(L["q_it"], fI), apply_linear(L["k_it"], fT)
        q_tp, k_tp = apply_linear(L["q_tp"], fT), apply_linear(L["k_tp"], fP)
        v_t, v_p = apply_linear(L["v_t"], fT), apply_linear(L["v_p"], fP)
    else:
        q_it = apply_linear(L["proj_i"], fI)
        k_it = q_tp = v_t = apply_linear(L["proj_t"], fT)
        k_tp = v_p = apply_linear(L["proj_p"], fP)
    rd = np.sqrt(params.d_k)
    p_it = oracle_softmax(q_it @ k_it.T / rd)
    p_tp = oracle_softmax(q_tp @ k_tp.T / rd)
    fused = p_it @ v_t + (p_it @ p_tp) @ v_p
    if params.residual_add:
        fused = fused + q_it
    return fused


def oracle_cascade(fL, fG, fP, params):
    L = params.linears
    rd = np.sqrt(params.d_k)

    def stage(x_q, x_kv, qn, kn, vn):
        q, k, v = apply_linear(L[qn], x_q), apply_linear(L[kn], x_kv), apply_linear(L[vn], x_kv)
        return oracle_softmax(q @ k.T / rd) @ v + q

    mid = stage(fL, fG, "s1_q", "s1_k", "s1_v")
    return stage(mid, fP, "s2_q", "s2_k", "s2_v")


def identity_params(variant, d_k, **kw):
    params = FusionParams(variant, d_k, np.random.default_rng(0), **kw)
    for lin in params.linears.values():
        lin.w.data = np.eye(d_k)
        lin.bias.data = np.zeros(d_k)
    return params


def random_streams(rng, g, t, l, d_k):
    return (rng.standard_normal((g, d_k)), rng.standard_normal((t, d_k)),
            rng.standard_normal((l, d_k)))


# ---- scaled dot-product attention ------------------------------------------


class TestAttention:
    def test_single_key_broadcasts_value(self):
        rng = np.random.default_rng(0)
        q = rng.standard_normal((4, 3))
        v = rng.standard_normal((1, 5))
        out = attention(Tensor(q), Tensor(rng.standard_normal((1, 3))), Tensor(v))
        assert np.abs(out.data - np.repeat(v, 4, axis=0)).max() <= 1e-12

    def test_large_scale_selects_rows(self):
        big = 1000.0
        q = k = np.eye(2) * big
        v = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = attention(Tensor(q), Tensor(k), Tensor(v))
        assert np.abs(out.data - v).max() <= 1e-9

    def test_matches_two_step_oracle(self):
        rng = np.random.default_rng(1)
        q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
        out = attention(Tensor(q), Tensor(k), Tensor(v))
        assert np.abs(out.data - oracle_attention(q, k, v)).max() <= 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))))


# ---- MEX attention ---------------------------------------------------------


class TestMexAttention:
    def test_single_token_collapse(self):
        # t = l = 1: all softmaxes collapse to 1, so each fused row is fT + fP
        params = identity_params("mex", 4)
        rng = np.random.default_rng(2)
        fI = rng.standard_normal((3, 4))
        fT = rng.standard_normal((1, 4))
        fP = rng.standard_normal((1, 4))
        out = mex_attention(Tensor(fI), Tensor(fT), Tensor(fP), params)
        expected = np.repeat(fT + fP, 3, axis=0)
        assert np.abs(out.fused.data - expected).max() <= 1e-12

    def test_chained_map_row_stochastic(self):
        rng = np.random.default_rng(3)
        params = FusionParams("mex", 8, rng)
        out = mex_attention(*(Tensor(s) for s in random_streams(rng, 3, 4, 5, 8)), params)
        assert np.abs(out.attn_itp.sum(axis=1) - 1).max() <= 1e-9

    def test_matches_independent_oracle(self):
        rng = np.random.default_rng(4)
        params = FusionParams("mex", 8, rng)
        fI, fT, fP = random_streams(rng, 3, 4, 5, 8)
        out = mex_attention(Tensor(fI), Tensor(fT), Tensor(fP), params)
        assert np.abs(out.fused.data - oracle_mex(fI, fT, fP, params)).max() <= 1e-10

    @pytest.mark.parametrize("per_pair,residual", [(True, False), (False, True)])
    def test_variants_match_oracle(self, per_pair, residual):
        rng = np.random.default_rng(5)
        params = FusionParams("mex", 8, rng, per_pair=per_pair, residual_add=residual)
        fI, fT, fP = random_streams(rng, 2, 3, 4, 8)
        out = mex_attention(Tensor(fI), Tensor(fT), Tensor(fP), params)
        assert np.abs(out.fused.data - oracle_mex(fI, fT, fP, params)).max() <= 1e-10

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        params = FusionParams("mex", 8, rng)
        fI, fT, fP = random_streams(rng, 3, 5, 4, 8)
        base = mex_attention(Tensor(fI), Tensor(fT), Tensor(fP), params).fused.data
        perm = rng.permutation(5)
        permuted = mex_attention(Tensor(fI), Tensor(fT[perm]), Tensor(fP), params).fused.data
        assert np.abs(base - permuted).max() <= 1e-10

    def test_channel_mismatch(self):
        params = FusionParams("mex", 8, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            mex_attention(Tensor(np.ones((2, 8))), Tensor(np.ones((2, 4))),
                          Tensor(np.ones((2, 8))), params)


# ---- cascade attention -----------------------------------------------------


class TestCascadeAttention:
    def test_single_prompt_token(self):
        # identity projections: stage-2 output = stage-1 output + projected value row
        params = identity_params("cascade", 4)
        rng = np.random.default_rng(7)
        fL, fG = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
        fP = rng.standard_normal((1, 4))
        out = cascade_attention(Tensor(fL), Tensor(fG), Tensor(fP), params)
        stage1 = oracle_attention(fL, fG, fG) + fL
        assert np.abs(out.fused.data - (stage1 + fP)).max() <= 1e-10

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(8)
        params = FusionParams("cascade", 8, rng)
        fG, fL, fP = random_streams(rng, 3, 4, 5, 8)
        out = cascade_attention(Tensor(fL), Tensor(fG), Tensor(fP), params)
        assert np.abs(out.fused.data - oracle_cascade(fL, fG, fP, params)).max() <= 1e-10

    def test_census_exceeds_mex(self):
        rng = np.random.default_rng(9)
        mex = FusionParams("mex", 256, rng)
        cascade = FusionParams("cascade", 256, rng)
        assert cascade.param_count() > mex.param_count()
        # census equals the analytic formula over registered linears
        assert mex.param_count() == 3 * (256 * 256 + 256)
        assert cascade.param_count() == 6 * (256 * 256 + 256)


# ---- pooling and profiling -------------------------------------------------


class TestStPool:
    def test_single_frame_single_token_identity(self):
        x = np.array([[[1.0, -2.0, 3.0]]])
        assert np.array_equal(st_pool(Tensor(x)).data, x[0, 0])

    def test_avg_then_max(self):
        x = np.array([[[1.0, 1.0]], [[3.0, 3.0]]])  # 2 frames, 1 token, d=2
        assert np.array_equal(st_pool(Tensor(x)).data, [3.0, 3.0])

    def test_matches_sequential_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((4, 5, 3))
        expected = x.mean(axis=1).max(axis=0)
        assert np.array_equal(st_pool(Tensor(x)).data, expected)


class TestProfile:
    def test_plain_census_formula(self):
        row = profile("plain", 4, 4, 4, 16)
        assert row["param_count"] == 3 * (16 * 16 + 16)

    def test_paper_dims_direction(self):
        mex = profile("mex", 16, 16, 20, 256)
        cascade = profile("cascade", 16, 16, 20, 256)
        assert mex["param_count"] < cascade["param_count"]
        assert mex["peak_values"] < cascade["peak_values"]

    @pytest.mark.parametrize("variant", ["mex", "cascade"])
    def test_flops_scale_quadratically(self, variant):
        lo = profile(variant, 16, 16, 20, 128)
        hi = profile(variant, 16, 16, 20, 256)
        assert 3.5 <= hi["flops"] / lo["flops"] <= 4.5

    def test_memory_ordering_across_configs(self):
        for d_k in (16, 32, 64):
            for g, t, l in ((2, 2, 2), (4, 3, 5), (16, 16, 20), (1, 2, 3)):
                if t * l <= 1:
                    continue
                mex = profile("mex", g, t, l, d_k)
                cascade = profile("cascade", g, t, l, d_k)
                assert mex["peak_values"] < cascade["peak_values"], (g, t, l, d_k)

    def test_deterministic(self):
        assert profile("mex", 3, 4, 5, 16) == profile("mex", 3, 4, 5, 16)

    def test_backward_pass_counted(self):
        fwd = profile("mex", 3, 4, 5, 16)
        bwd = profile("mex", 3, 4, 5, 16, with_backward=True)
        assert bwd["flops"] > fwd["flops"]
