import numpy as np
import pytest

from blockattn import (
    compress_kv,
    importance_scores_from_compressed,
    make_config,
    select_topk_blocks,
)
from blockattn.scenario import Scenario, resolve, tensors


def _cfg(**kw):
    base = dict(N=64, d_K=8, d_V=8, h=4, h_K=2, B_K=8, T=3, B_Q=8)
    base.update(kw)
    return make_config(**base)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError, match="unknown selection mode"):
        Scenario(_cfg(), selection_mode="everything")


def test_random_uniform_mode_is_seed_deterministic():
    cfg = _cfg()
    _, a = resolve(Scenario(cfg, seed=5))
    _, b = resolve(Scenario(cfg, seed=5))
    _, c = resolve(Scenario(cfg, seed=6))
    np.testing.assert_array_equal(a.idx, b.idx)
    assert not np.array_equal(a.idx, c.idx)


def test_from_scores_mode_uses_compressed_importance():
    cfg = _cfg()
    scn = Scenario(cfg, seed=3, selection_mode="from_scores")
    _, sel = resolve(scn)
    Q, K, V = tensors(cfg, 3)
    cmp = compress_kv(K, V, cfg)
    want = select_topk_blocks(importance_scores_from_compressed(Q, cmp.K_cmp, cfg), cfg)
    np.testing.assert_array_equal(sel.idx, want.idx)


def test_self_block_only_mode():
    cfg = _cfg()
    _, sel = resolve(Scenario(cfg, selection_mode="self_block_only"))
    own = np.arange(cfg.N) // cfg.B_K
    np.testing.assert_array_equal(sel.idx[:, :, 0], np.broadcast_to(own, (cfg.h_K, cfg.N)))
    assert (sel.idx[:, :, 1:] == -1).all()


def test_full_mode_widens_t_to_block_count():
    cfg = _cfg(T=3)
    resolved_cfg, sel = resolve(Scenario(cfg, selection_mode="full"))
    assert resolved_cfg.T == resolved_cfg.b
    assert sel.idx.shape == (cfg.h_K, cfg.N, resolved_cfg.b)


def test_tensor_streams_are_independent_of_each_other():
    cfg = _cfg()
    Q1, K1, V1 = tensors(cfg, 9)
    Q2, K2, V2 = tensors(cfg, 9)
    np.testing.assert_array_equal(Q1, Q2)
    np.testing.assert_array_equal(K1, K2)
    np.testing.assert_array_equal(V1, V2)
    assert not np.array_equal(Q1[:, :, 0], K1[:, :, 0])
