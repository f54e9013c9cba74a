import numpy as np
import pytest

from blockattn import (
    compress_kv,
    compressed_attention_forward,
    full_attention_forward,
    gated_combine,
    make_config,
    mask_from_selection,
    masked_attention_forward,
    select_topk_blocks,
    sliding_attention_forward,
)
from blockattn.rng import make_gates, make_qkv, make_scores

from helpers import brute_force_masked


def _cfg(**kw):
    base = dict(N=32, d_K=8, d_V=8, h=4, h_K=2, B_K=8, T=2)
    base.update(kw)
    return make_config(**base)


def test_pooling_identity_when_block_is_one_token():
    cfg = _cfg(B_K=1, T=1)
    _, K, V = make_qkv(cfg, 0)
    cmp = compress_kv(K, V, cfg)
    np.testing.assert_array_equal(cmp.K_cmp, K)
    np.testing.assert_array_equal(cmp.V_cmp, V)


def test_pooling_of_identical_rows():
    cfg = _cfg(N=8, B_K=4, T=2)
    K = np.tile(np.arange(cfg.d_K, dtype=float)[None, :, None], (cfg.N, 1, cfg.h_K))
    V = np.ones((cfg.N, cfg.d_V, cfg.h_K)) * 3.5
    cmp = compress_kv(K, V, cfg)
    np.testing.assert_allclose(cmp.K_cmp[0], K[0])
    np.testing.assert_allclose(cmp.V_cmp, 3.5)


def test_pooling_arithmetic_mean():
    cfg = make_config(N=2, d_K=1, d_V=1, h=1, h_K=1, B_K=2, T=1)
    K = np.array([1.0, 3.0]).reshape(2, 1, 1)
    V = np.array([5.0, 7.0]).reshape(2, 1, 1)
    cmp = compress_kv(K, V, cfg)
    assert cmp.K_cmp[0, 0, 0] == 2.0
    assert cmp.V_cmp[0, 0, 0] == 6.0


def test_compressed_single_block_uses_prefix_rows():
    cfg = _cfg(N=8, B_K=8, T=1)
    Q, K, V = make_qkv(cfg, 1)
    res = compressed_attention_forward(Q, compress_kv(K, V, cfg), cfg)
    for t in range(cfg.N - 1):  # before the block completes
        for j in range(cfg.h):
            np.testing.assert_allclose(res.out[t, :, j], V[: t + 1, :, j // cfg.g].mean(axis=0))
    # the last token sees the completed pooled block, which is the same mean
    for j in range(cfg.h):
        np.testing.assert_allclose(res.out[-1, :, j], V[:, :, j // cfg.g].mean(axis=0))


def test_compressed_identical_values_collapse():
    cfg = _cfg(N=16, B_K=4, T=2)
    Q, K, _ = make_qkv(cfg, 2)
    V = np.tile(np.linspace(-1, 1, cfg.d_V)[None, :, None], (cfg.N, 1, cfg.h_K))
    res = compressed_attention_forward(Q, compress_kv(K, V, cfg), cfg)
    np.testing.assert_allclose(res.out, np.tile(V[:, :, :1], (1, 1, cfg.h)), atol=1e-12)


def test_compressed_matches_pooled_row_loop():
    cfg = _cfg(N=24, B_K=4, T=2)
    Q, K, V = make_qkv(cfg, 3)
    cmp = compress_kv(K, V, cfg)
    res = compressed_attention_forward(Q, cmp, cfg)
    scale = cfg.scale
    for j in range(cfg.h):
        kh = j // cfg.g
        for t in range(cfg.N):
            n_formed = (t + 1) // cfg.B_K
            if n_formed == 0:
                continue
            logits = np.array([float(Q[t, :, j] @ cmp.K_cmp[i, :, kh]) * scale for i in range(n_formed)])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            want = sum(w[i] * cmp.V_cmp[i, :, kh] for i in range(n_formed))
            np.testing.assert_allclose(res.out[t, :, j], want, atol=1e-12)


def test_compressed_degenerates_to_full_attention_at_unit_block():
    cfg = _cfg(N=16, B_K=1, T=1)
    Q, K, V = make_qkv(cfg, 4)
    full = full_attention_forward(Q, K, V, cfg)
    got = compressed_attention_forward(Q, compress_kv(K, V, cfg), cfg)
    assert np.abs(got.out - full.out).max() <= 1e-12


def test_sliding_with_window_covering_history_equals_full():
    cfg = _cfg(N=32, W=32)
    Q, K, V = make_qkv(cfg, 5)
    assert np.abs(sliding_attention_forward(Q, K, V, cfg).out - full_attention_forward(Q, K, V, cfg).out).max() <= 1e-12


def test_sliding_unit_window_returns_value_rows():
    cfg = _cfg(N=16, W=1)
    Q, K, V = make_qkv(cfg, 6)
    res = sliding_attention_forward(Q, K, V, cfg)
    for j in range(cfg.h):
        np.testing.assert_allclose(res.out[:, :, j], V[:, :, j // cfg.g], atol=1e-13)


def test_sliding_matches_band_mask_gather_loop():
    cfg = _cfg(N=32, W=4, h=2, h_K=1)
    Q, K, V = make_qkv(cfg, 7)
    res = sliding_attention_forward(Q, K, V, cfg)
    t = np.arange(cfg.N)
    allow = (t[None, :, None] - t[None, None, :] >= 0) & (t[None, :, None] - t[None, None, :] < cfg.W)
    allow = np.broadcast_to(allow, (cfg.h_K, cfg.N, cfg.N))
    want_out, _ = brute_force_masked(Q, K, V, allow, cfg)
    assert np.abs(res.out - want_out).max() <= 1e-12


def _three_branches(cfg, seed):
    Q, K, V = make_qkv(cfg, seed)
    sel = select_topk_blocks(make_scores(cfg, seed), cfg)
    return (
        compressed_attention_forward(Q, compress_kv(K, V, cfg), cfg),
        masked_attention_forward(Q, K, V, mask_from_selection(sel, cfg), cfg),
        sliding_attention_forward(Q, K, V, cfg),
    )


def test_one_hot_gate_returns_single_branch():
    cfg = _cfg()
    outs = _three_branches(cfg, 8)
    tau = np.zeros((cfg.N, 3))
    tau[:, 1] = 1.0
    np.testing.assert_array_equal(gated_combine(outs, tau, cfg).out, outs[1].out)


def test_zero_gates_annihilate():
    cfg = _cfg()
    outs = _three_branches(cfg, 9)
    assert not gated_combine(outs, np.zeros((cfg.N, 3)), cfg).out.any()


def test_equal_branches_convex_combination():
    cfg = _cfg()
    outs = _three_branches(cfg, 10)
    same = (outs[1], outs[1], outs[1])
    tau = np.full((cfg.N, 3), 1.0 / 3.0)
    np.testing.assert_allclose(gated_combine(same, tau, cfg).out, outs[1].out, atol=1e-14)


def test_combine_is_linear_in_gates_and_branches():
    cfg = _cfg()
    outs = _three_branches(cfg, 11)
    tau1 = make_gates(cfg, 1)
    tau2 = make_gates(cfg, 2)
    lam = 0.3
    lhs = gated_combine(outs, lam * tau1 + (1 - lam) * tau2, cfg).out
    rhs = lam * gated_combine(outs, tau1, cfg).out + (1 - lam) * gated_combine(outs, tau2, cfg).out
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_three_branch_pipeline_with_engine_selected_branch():
    # end-to-end: compressed + engine-computed selected + sliding, gated
    from blockattn.kv_major import selected_forward

    cfg = _cfg(N=64, B_K=8, T=3, W=8)
    Q, K, V = make_qkv(cfg, 13)
    cmp = compress_kv(K, V, cfg)
    from blockattn import importance_scores_from_compressed

    sel = select_topk_blocks(importance_scores_from_compressed(Q, cmp.K_cmp, cfg), cfg)
    engine_out, _ = selected_forward(Q, K, V, sel, cfg)
    branches = (
        compressed_attention_forward(Q, cmp, cfg),
        engine_out,
        sliding_attention_forward(Q, K, V, cfg),
    )
    tau = make_gates(cfg, 13)
    combined = gated_combine(branches, tau, cfg)
    # oracle route: dense masked selected branch in the same combination
    oracle_branches = (
        branches[0],
        masked_attention_forward(Q, K, V, mask_from_selection(sel, cfg), cfg),
        branches[2],
    )
    want = gated_combine(oracle_branches, tau, cfg)
    assert np.abs(combined.out - want.out).max() <= 1e-10


def test_gate_range_enforced():
    cfg = _cfg()
    outs = _three_branches(cfg, 12)
    bad = np.zeros((cfg.N, 3))
    bad[0, 0] = 1.5
    with pytest.raises(ValueError, match="gate values"):
        gated_combine(outs, bad, cfg)
