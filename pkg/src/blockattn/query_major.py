"""Query-major selected-attention engine (the baseline schedule).

One task per (KV head, token): the task batches the group's ``g`` query
heads, pads the batch to ``min_tile`` rows when ``g`` is smaller (padding is
counted as real traffic and real FLOPs, then masked), and walks the token's
selected KV blocks in ascending order with a standard online softmax.
Blocks that start after the token are skipped with zero loads; the partially
causal block is loaded in full and masked by position.

The backward pass mirrors the forward schedule. Per-token dQ rows are
exclusively owned; dK/dV contributions of all tokens touching a block are
accumulated in ascending token order, a deterministic stand-in for the
atomic adds a real kernel would need.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .config import AttentionConfig, as_headed
from .meter import TrafficMeter
from .oracle import AttentionOutput
from .selection import SelectionTensor, validate_selection


def _per_kv_head(X: np.ndarray, kh: int, g: int) -> np.ndarray:
    """Contiguous (N, g, d) view of one KV-head group of a (N, d, h) tensor."""
    return np.ascontiguousarray(X[:, :, kh * g : (kh + 1) * g].transpose(0, 2, 1))


def _meter_forward(sel: SelectionTensor, cfg: AttentionConfig, meter: TrafficMeter) -> None:
    ph = meter.phase("query_major")
    bpe = cfg.bytes_per_elem
    pad = max(cfg.g, cfg.min_tile)
    lens = sel.row_lengths()  # (h_K, N); every entry is causal post-validation
    steps = int(lens.sum())
    ph.task_count += cfg.h_K * cfg.N
    ph.inner_iterations += steps
    ph.bytes_loaded += (cfg.h_K * cfg.N * pad * cfg.d_K + steps * cfg.B_K * (cfg.d_K + cfg.d_V)) * bpe
    ph.bytes_stored += cfg.h_K * cfg.N * cfg.g * cfg.d_V * bpe
    ph.flops += steps * 2 * pad * cfg.B_K * (cfg.d_K + cfg.d_V)


def selected_forward(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    sel: SelectionTensor,
    cfg: AttentionConfig,
) -> tuple[AttentionOutput, TrafficMeter]:
    Q = as_headed(Q, cfg.N, cfg.d_K, cfg.h, "Q")
    K = as_headed(K, cfg.N, cfg.d_K, cfg.h_K, "K")
    V = as_headed(V, cfg.N, cfg.d_V, cfg.h_K, "V")
    validate_selection(sel, cfg)
    kern = _kernels.active()
    out = np.empty((cfg.N, cfg.d_V, cfg.h))
    lse = np.empty((cfg.h, cfg.N))
    for kh in range(cfg.h_K):
        qh = _per_kv_head(Q, kh, cfg.g)
        ks = np.ascontiguousarray(K[:, :, kh])
        vs = np.ascontiguousarray(V[:, :, kh])
        rows = np.ascontiguousarray(sel.idx[kh])
        out_h, m_h, l_h = kern.query_forward_head(qh, ks, vs, rows, cfg.scale, cfg.B_K)
        out[:, :, kh * cfg.g : (kh + 1) * cfg.g] = out_h.transpose(0, 2, 1)
        lse[kh * cfg.g : (kh + 1) * cfg.g] = (m_h + np.log(l_h)).T
    meter = TrafficMeter()
    _meter_forward(sel, cfg, meter)
    return AttentionOutput(out=out, lse=lse), meter


def selected_backward(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    sel: SelectionTensor,
    dOut: np.ndarray,
    cfg: AttentionConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, TrafficMeter]:
    """Gradients of sum(selected_forward(...).out * dOut) w.r.t. Q, K, V."""
    Q = as_headed(Q, cfg.N, cfg.d_K, cfg.h, "Q")
    K = as_headed(K, cfg.N, cfg.d_K, cfg.h_K, "K")
    V = as_headed(V, cfg.N, cfg.d_V, cfg.h_K, "V")
    dOut = as_headed(dOut, cfg.N, cfg.d_V, cfg.h, "dOut")
    validate_selection(sel, cfg)
    kern = _kernels.active()
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    for kh in range(cfg.h_K):
        qh = _per_kv_head(Q, kh, cfg.g)
        doh = _per_kv_head(dOut, kh, cfg.g)
        ks = np.ascontiguousarray(K[:, :, kh])
        vs = np.ascontiguousarray(V[:, :, kh])
        rows = np.ascontiguousarray(sel.idx[kh])
        dqh, dks, dvs = kern.query_backward_head(qh, ks, vs, doh, rows, cfg.scale, cfg.B_K)
        dQ[:, :, kh * cfg.g : (kh + 1) * cfg.g] = dqh.transpose(0, 2, 1)
        dK[:, :, kh] = dks
        dV[:, :, kh] = dvs
    meter = TrafficMeter()
    ph = meter.phase("query_major")
    bpe = cfg.bytes_per_elem
    pad = max(cfg.g, cfg.min_tile)
    steps = int(sel.row_lengths().sum())
    ph.task_count += cfg.h_K * cfg.N
    ph.inner_iterations += steps
    ph.bytes_loaded += (
        cfg.h_K * cfg.N * (pad * cfg.d_K + cfg.g * cfg.d_V)
        + 2 * steps * cfg.B_K * (cfg.d_K + cfg.d_V)
    ) * bpe
    ph.bytes_stored += (
        cfg.h_K * cfg.N * cfg.g * cfg.d_K + steps * cfg.B_K * (cfg.d_K + cfg.d_V)
    ) * bpe
    ph.flops += steps * 2 * pad * cfg.B_K * (4 * cfg.d_K + 3 * cfg.d_V)
    return dQ, dK, dV, meter
