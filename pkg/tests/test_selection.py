import numpy as np
import pytest

from blockattn import (
    SelectionError,
    SelectionTensor,
    build_inverse_index,
    importance_scores_from_compressed,
    load_selection,
    make_config,
    save_selection,
    select_topk_blocks,
    selection_from_inverse,
    self_block_selection,
    validate_selection,
)
from blockattn.rng import make_qkv, make_scores


def _cfg(**kw):
    base = dict(N=16, d_K=4, d_V=4, h=2, h_K=1, B_K=4, T=2)
    base.update(kw)
    return make_config(**base)


def test_first_block_tokens_select_only_block_zero():
    cfg = _cfg()
    scores = make_scores(cfg, 0)
    sel = select_topk_blocks(scores, cfg)
    for t in range(cfg.B_K):
        assert sel.idx[0, t, 0] == 0
        assert (sel.idx[0, t, 1:] == -1).all()


def test_full_budget_selects_every_causal_block():
    cfg = _cfg(T=4)
    sel = select_topk_blocks(make_scores(cfg, 1), cfg)
    t_last = cfg.N - 1
    np.testing.assert_array_equal(sel.idx[0, t_last], np.arange(cfg.b))


def test_tie_breaks_toward_lower_block_index():
    cfg = _cfg(N=12, B_K=4, T=2)  # b = 3
    scores = np.zeros((1, cfg.N, cfg.b))
    scores[0, :, :] = (0.5, 0.5, 0.9)
    sel = select_topk_blocks(scores, cfg)
    t = 10  # inside block 2
    np.testing.assert_array_equal(sel.idx[0, t], [0, 2])  # own block forced, tie -> 0


def test_own_block_always_present():
    cfg = _cfg(N=64, B_K=8, T=3, h_K=2, h=4)
    sel = select_topk_blocks(make_scores(cfg, 2), cfg)
    own = np.arange(cfg.N) // cfg.B_K
    for kh in range(cfg.h_K):
        for t in range(cfg.N):
            assert own[t] in sel.idx[kh, t]


def test_importance_scores_scalar_example():
    # g=1, d=1: q=2 against pooled keys (1, 3) -> scores (2, 6) before scaling
    cfg = make_config(N=2, d_K=1, d_V=1, h=1, h_K=1, B_K=1, T=1)
    Q = np.full((2, 1, 1), 2.0)
    K_cmp = np.array([1.0, 3.0]).reshape(2, 1, 1)
    scores = importance_scores_from_compressed(Q, K_cmp, cfg)
    np.testing.assert_allclose(scores[0, 0], [2.0, 6.0])  # scale = 1/sqrt(1)


def test_importance_scores_zero_query_row():
    cfg = make_config(N=8, d_K=4, d_V=4, h=2, h_K=1, B_K=4, T=2)
    Q, K, _ = make_qkv(cfg, 3)
    Q[3] = 0.0
    K_cmp = K.reshape(cfg.b, cfg.B_K, cfg.d_K, cfg.h_K).mean(axis=1)
    scores = importance_scores_from_compressed(Q, K_cmp, cfg)
    assert np.abs(scores[0, 3]).max() == 0.0


def test_importance_scores_match_explicit_head_loop():
    cfg = make_config(N=8, d_K=4, d_V=4, h=4, h_K=2, B_K=4, T=2)
    Q, K, _ = make_qkv(cfg, 4)
    K_cmp = K.reshape(cfg.b, cfg.B_K, cfg.d_K, cfg.h_K).mean(axis=1)
    scores = importance_scores_from_compressed(Q, K_cmp, cfg)
    for kh in range(cfg.h_K):
        for t in range(cfg.N):
            for i in range(cfg.b):
                acc = 0.0
                for j in range(kh * cfg.g, (kh + 1) * cfg.g):
                    acc += float(Q[t, :, j] @ K_cmp[i, :, kh]) / np.sqrt(cfg.d_K)
                np.testing.assert_allclose(scores[kh, t, i], acc / cfg.g, atol=1e-12)


def test_inverse_index_hand_example():
    # N=4, B_K=2, T=2; rows t0:[0], t1:[0], t2:[0,1], t3:[0,1]
    cfg = make_config(N=4, d_K=2, d_V=2, h=1, h_K=1, B_K=2, T=2)
    idx = np.array([[[0, -1], [0, -1], [0, 1], [0, 1]]], dtype=np.int32)
    inv = build_inverse_index(SelectionTensor(idx), cfg)
    np.testing.assert_array_equal(inv.queries[0][0], [0, 1, 2, 3])
    np.testing.assert_array_equal(inv.queries[0][1], [2, 3])
    assert inv.n_valid[0].tolist() == [4, 2]
    assert inv.slots(0, 1) == {2: 0, 3: 1}


def test_self_block_only_inverse():
    cfg = _cfg(N=16, B_K=4, T=2)
    inv = build_inverse_index(self_block_selection(cfg), cfg)
    for i in range(cfg.b):
        np.testing.assert_array_equal(inv.queries[0][i], np.arange(i * 4, (i + 1) * 4))


def test_full_selection_inverse_is_causal_suffix():
    cfg = _cfg(N=16, B_K=4, T=4)
    from blockattn import full_selection

    inv = build_inverse_index(full_selection(cfg), cfg)
    for i in range(cfg.b):
        np.testing.assert_array_equal(inv.queries[0][i], np.arange(i * cfg.B_K, cfg.N))


def test_round_trip_through_inverse():
    cfg = _cfg(N=64, B_K=8, T=3, h_K=2, h=4)
    sel = select_topk_blocks(make_scores(cfg, 5), cfg)
    inv = build_inverse_index(sel, cfg)
    rebuilt = selection_from_inverse(inv, cfg)
    np.testing.assert_array_equal(rebuilt.idx, sel.idx)


def test_inverse_index_memoized_on_selection():
    cfg = _cfg()
    sel = select_topk_blocks(make_scores(cfg, 6), cfg)
    assert build_inverse_index(sel, cfg) is build_inverse_index(sel, cfg)


def test_inverse_independent_of_row_processing_order():
    cfg = _cfg(N=32, B_K=8, T=3)
    sel = select_topk_blocks(make_scores(cfg, 7), cfg)
    twin = SelectionTensor(sel.idx.copy())
    a = build_inverse_index(sel, cfg)
    b = build_inverse_index(twin, cfg)
    assert np.array_equal(a.n_valid, b.n_valid)
    for qa, qb in zip(a.queries, b.queries):
        for x, y in zip(qa, qb):
            np.testing.assert_array_equal(x, y)


def test_malformed_duplicate_entry():
    cfg = _cfg(N=8, B_K=2, T=2)
    idx = self_block_selection(cfg).idx.copy()
    idx[0, 5, :] = (2, 2)
    with pytest.raises(SelectionError, match="duplicate"):
        build_inverse_index(SelectionTensor(idx), cfg)


def test_malformed_non_causal_entry():
    cfg = _cfg(N=8, B_K=2, T=2)
    idx = self_block_selection(cfg).idx.copy()
    idx[0, 1, 1] = 3  # token 1 is in block 0; block 3 is in its future
    with pytest.raises(SelectionError, match="non-causal"):
        build_inverse_index(SelectionTensor(idx), cfg)


def test_malformed_empty_row():
    cfg = _cfg(N=8, B_K=2, T=2)
    idx = self_block_selection(cfg).idx.copy()
    idx[0, 4, :] = -1
    with pytest.raises(SelectionError, match="empty row"):
        validate_selection(SelectionTensor(idx), cfg)


def test_malformed_decreasing_row():
    cfg = _cfg(N=8, B_K=2, T=2)
    idx = self_block_selection(cfg).idx.copy()
    idx[0, 6, :] = (3, 1)
    with pytest.raises(SelectionError, match="increasing"):
        validate_selection(SelectionTensor(idx), cfg)


def test_serialization_round_trip(tmp_path):
    cfg = _cfg(N=32, B_K=8, T=3, h_K=2, h=4)
    sel = select_topk_blocks(make_scores(cfg, 8), cfg)
    path = tmp_path / "sel.bin"
    save_selection(sel, path)
    loaded = load_selection(path)
    np.testing.assert_array_equal(loaded.idx, sel.idx)


def test_serialization_layout_is_header_plus_row_major_int32(tmp_path):
    cfg = _cfg(N=8, B_K=2, T=2, h_K=2, h=4)
    sel = select_topk_blocks(make_scores(cfg, 12), cfg)
    path = tmp_path / "sel.bin"
    save_selection(sel, path)
    raw = path.read_bytes()
    header = np.frombuffer(raw[:12], dtype="<i4")
    np.testing.assert_array_equal(header, [cfg.h_K, cfg.N, cfg.T])
    body = np.frombuffer(raw[12:], dtype="<i4").reshape(cfg.h_K, cfg.N, cfg.T)
    np.testing.assert_array_equal(body, sel.idx)


def test_serialization_rejects_truncated_file(tmp_path):
    cfg = _cfg()
    sel = select_topk_blocks(make_scores(cfg, 9), cfg)
    path = tmp_path / "sel.bin"
    save_selection(sel, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(SelectionError, match="malformed selection"):
        load_selection(path)


def test_attendance_totals_are_policy_deterministic():
    # Sum of n_valid equals the row-length total, which depends only on the
    # causal structure: tokens in block j select min(j + 1, T) blocks.
    cfg = make_config(N=4096, d_K=8, d_V=8, h=1, h_K=1, B_K=64, T=16)
    sel = select_topk_blocks(make_scores(cfg, 10), cfg)
    inv = build_inverse_index(sel, cfg)
    expected = sum(min(t // cfg.B_K + 1, cfg.T) for t in range(cfg.N))
    assert int(inv.n_valid.sum()) == expected


def test_attendance_mean_approaches_uniform_estimate():
    # The uniform model predicts mean n_valid = N*T/b; the causal policy
    # undershoots by (T-1)/(2b), so the +-10% band holds once b is large.
    cfg = make_config(N=16384, d_K=8, d_V=8, h=1, h_K=1, B_K=64, T=16)
    sel = select_topk_blocks(make_scores(cfg, 11), cfg)
    inv = build_inverse_index(sel, cfg)
    mean = inv.n_valid.mean()
    target = cfg.N * cfg.T / cfg.b
    assert abs(mean - target) / target <= 0.10
