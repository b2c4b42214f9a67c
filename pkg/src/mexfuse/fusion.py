"""Fusion block variants and their instrumentation.

Three interchangeable blocks over the projected modality streams:

* ``plain``   — one scaled dot-product attention (query = local tracks,
  key/value = prompt tokens).
* ``cascade`` — two sequential attentions with full query/key/value
  projections each; stage outputs add their query vector.
* ``mex``     — the memory-efficient triple-modality block: two
  row-stochastic maps chained by a matrix product, reusing one shared
  projection per modality.

Every forward pass is charged to the active ledger, so parameter counts,
peak live values, and multiply-add totals are exact and reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DimensionError,
    Linear,
    Tensor,
    add,
    cosine_similarity,
    current_context,
    fresh_context,
    matmul,
    max_axis,
    mean_axis,
    scale,
    softmax_rows,
    sum_all,
    transpose,
)

VARIANTS = ("mex", "cascade", "plain")


@dataclass
class FusionOutput:
    fused: Tensor
    attn_it: np.ndarray | None = None
    attn_tp: np.ndarray | None = None
    attn_itp: np.ndarray | None = None
    ledger: dict = field(default_factory=dict)


class FusionParams:
    """Learnable projections for one fusion variant, with parameter census.

    MEX defaults to one shared projection per modality (the same projected
    track/prompt features serve as keys and values, and the track projection
    is reused as the query of the second map). ``per_pair=True`` switches to
    separate query/key/value projections per modality pair, which brings the
    census up to the cascade block's.
    """

    def __init__(self, variant, d_k, rng, residual_add=False, per_pair=False,
                 requires_grad=True):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.variant = variant
        self.d_k = d_k
        self.residual_add = residual_add
        self.per_pair = per_pair
        self.linears = {}

        def lin(name):
            self.linears[name] = Linear.init(d_k, d_k, rng, requires_grad=requires_grad)

        if variant == "mex":
            if per_pair:
                for name in ("q_it", "k_it", "v_t", "q_tp", "k_tp", "v_p"):
                    lin(name)
            else:
                for name in ("proj_i", "proj_t", "proj_p"):
                    lin(name)
        elif variant == "cascade":
            for name in ("s1_q", "s1_k", "s1_v", "s2_q", "s2_k", "s2_v"):
                lin(name)
        else:
            for name in ("q", "k", "v"):
                lin(name)

    def param_count(self):
        return sum(l.param_count() for l in self.linears.values())

    def parameters(self):
        out = []
        for name in sorted(self.linears):
            out.extend(self.linears[name].parameters())
        return out

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v for 2-D operands."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention needs 2-D q, k, v")
    if q.data.shape[1] != k.data.shape[1]:
        raise DimensionError(f"q/k channel mismatch: {q.data.shape} vs {k.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise DimensionError(f"k/v row mismatch: {k.data.shape} vs {v.data.shape}")
    d_k = q.data.shape[1]
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
    return matmul(softmax_rows(scores), v)


def _check_channels(params, *streams):
    for s in streams:
        if s.data.ndim != 2 or s.data.shape[1] != params.d_k:
            raise DimensionError(
                f"stream shape {s.data.shape} incompatible with d_k={params.d_k}")


def mex_attention(fI: Tensor, fT: Tensor, fP: Tensor, params: FusionParams) -> FusionOutput:
    """Triple-modality attention: two chained row-stochastic maps.

    p_it = softmax(f(I) f(T)^T / sqrt(d_k))          [g x t]
    p_tp = softmax(f(T) f(P)^T / sqrt(d_k))          [t x l]
    p_itp = p_it @ p_tp                              [g x l]
    fused = p_it @ f(T) + p_itp @ f(P)               [g x d_k]

    ``residual_add`` optionally adds the projected query stream to the output.
    """
    if params.variant != "mex":
        raise ValueError("params built for a different variant")
    _check_channels(params, fI, fT, fP)
    inv = 1.0 / math.sqrt(params.d_k)
    L = params.linears
    if params.per_pair:
        q_it, k_it = L["q_it"](fI), L["k_it"](fT)
        q_tp, k_tp = L["q_tp"](fT), L["k_tp"](fP)
        v_t, v_p = L["v_t"](fT), L["v_p"](fP)
    else:
        q_it = L["proj_i"](fI)
        k_it = q_tp = v_t = L["proj_t"](fT)
        k_tp = v_p = L["proj_p"](fP)
    p_it = softmax_rows(scale(matmul(q_it, transpose(k_it)), inv))
    p_tp = softmax_rows(scale(matmul(q_tp, transpose(k_tp)), inv))
    p_itp = matmul(p_it, p_tp)
    fused = add(matmul(p_it, v_t), matmul(p_itp, v_p))
    if params.residual_add:
        fused = add(fused, q_it)
    return FusionOutput(
        fused=fused,
        attn_it=p_it.data.copy(),
        attn_tp=p_tp.data.copy(),
        attn_itp=p_itp.data.copy(),
        ledger=current_context().ledger.snapshot(),
    )


def cascade_attention(fLocal: Tensor, fGlobal: Tensor, fPrompt: Tensor,
                      params: FusionParams) -> FusionOutput:
    """Two sequential pairwise attentions (the heavier reference block).

    Stage 1: local tracks query the global frame; stage 2 queries the prompt
    with stage 1's output. Each stage adds its (projected) query to the
    attention result.
    """
    if params.variant != "cascade":
        raise ValueError("params built for a different variant")
    _check_channels(params, fLocal, fGlobal, fPrompt)
    inv = 1.0 / math.sqrt(params.d_k)
    L = params.linears

    def stage(x_q, x_kv, qn, kn, vn, keep=None):
        q, k, v = L[qn](x_q), L[kn](x_kv), L[vn](x_kv)
        p = softmax_rows(scale(matmul(q, transpose(k)), inv))
        if keep is not None:
            keep.append(p.data.copy())
        return add(matmul(p, v), q)

    maps = []
    mid = stage(fLocal, fGlobal, "s1_q", "s1_k", "s1_v", keep=maps)
    out = stage(mid, fPrompt, "s2_q", "s2_k", "s2_v", keep=maps)
    return FusionOutput(fused=out, attn_it=maps[0], attn_tp=maps[1],
                        ledger=current_context().ledger.snapshot())


def plain_attention(fLocal: Tensor, fPrompt: Tensor, params: FusionParams) -> FusionOutput:
    if params.variant != "plain":
        raise ValueError("params built for a different variant")
    _check_channels(params, fLocal, fPrompt)
    L = params.linears
    out = attention(L["q"](fLocal), L["k"](fPrompt), L["v"](fPrompt))
    return FusionOutput(fused=out, ledger=current_context().ledger.snapshot())


def fuse(params: FusionParams, fGlobal: Tensor, fLocal: Tensor, fPrompt: Tensor) -> FusionOutput:
    """Dispatch on the configured variant with a uniform stream order."""
    if params.variant == "mex":
        return mex_attention(fGlobal, fLocal, fPrompt, params)
    if params.variant == "cascade":
        return cascade_attention(fLocal, fGlobal, fPrompt, params)
    return plain_attention(fLocal, fPrompt, params)


def st_pool(x: Tensor) -> Tensor:
    """Spatio-temporal pooling: average over tokens, then max over frames.

    Input is [n_frames, s, d_k]; output is [d_k].
    """
    if x.data.ndim != 3:
        raise DimensionError(f"st_pool expects [frames, tokens, d], got {x.data.shape}")
    return max_axis(mean_axis(x, axis=1), axis=0)


def score(fused_pooled: Tensor, prompt_pooled: Tensor) -> Tensor:
    """Raw referring score: cosine similarity of the pooled vectors."""
    return cosine_similarity(fused_pooled, prompt_pooled)


def profile(variant, g, t, l, d_k, seed=0, with_backward=False,
            residual_add=False, per_pair=False):
    """One instrumented forward (optionally backward) pass under a fresh ledger.

    Returns exact, deterministic counts: trainable parameters, peak live
    values, and accumulated multiply-adds.
    """
    rng = np.random.default_rng(seed)
    with fresh_context() as ctx:
        params = FusionParams(variant, d_k, rng, residual_add=residual_add,
                              per_pair=per_pair, requires_grad=with_backward)
        fGlobal = Tensor(rng.standard_normal((g, d_k)))
        fLocal = Tensor(rng.standard_normal((t, d_k)))
        fPrompt = Tensor(rng.standard_normal((l, d_k)))
        # parameters and inputs are not activations; count the pass only
        ctx.ledger.reset()
        out = fuse(params, fGlobal, fLocal, fPrompt)
        if with_backward:
            sum_all(out.fused).backward()
        snap = ctx.ledger.snapshot()
    return {
        "variant": variant,
        "d_k": d_k,
        "g": g,
        "t": t,
        "l": l,
        "param_count": params.param_count(),
        "peak_values": snap["peak_values"],
        "flops": snap["flops"],
    }
