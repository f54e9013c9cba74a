"""Compressed and sliding-window attention branches plus the gated combiner.

These are the minimal companions of the selected branch: block mean-pooled
compressed attention, banded sliding attention, and the per-token convex
gating that merges the three branch outputs.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import AttentionConfig, as_headed
from .oracle import AttentionOutput, band_mask, masked_attention_forward


@dataclasses.dataclass
class CompressedKV:
    """Mean-pooled KV rows, one per (block, KV head).

    ``K_cmp``/``V_cmp`` have shape (b, d, h_K). ``K_prefix``/``V_prefix`` hold
    the running prefix means of rows 0..t for the tokens of the first block
    (shape (min(B_K-1, N), d, h_K)); they serve tokens that precede the first
    completed block so no attention row is ever empty.
    """

    K_cmp: np.ndarray
    V_cmp: np.ndarray
    K_prefix: np.ndarray
    V_prefix: np.ndarray


def compress_kv(K, V, cfg: AttentionConfig) -> CompressedKV:
    """Non-overlapping mean pooling with size and stride B_K."""
    K = as_headed(K, cfg.N, cfg.d_K, cfg.h_K, "K")
    V = as_headed(V, cfg.N, cfg.d_V, cfg.h_K, "V")
    K_cmp = K.reshape(cfg.b, cfg.B_K, cfg.d_K, cfg.h_K).mean(axis=1)
    V_cmp = V.reshape(cfg.b, cfg.B_K, cfg.d_V, cfg.h_K).mean(axis=1)
    n_pref = min(cfg.B_K - 1, cfg.N)
    counts = np.arange(1, n_pref + 1, dtype=np.float64)[:, None, None]
    K_prefix = np.cumsum(K[:n_pref], axis=0) / counts
    V_prefix = np.cumsum(V[:n_pref], axis=0) / counts
    return CompressedKV(K_cmp=K_cmp, V_cmp=V_cmp, K_prefix=K_prefix, V_prefix=V_prefix)


def compressed_attention_forward(Q, cmp: CompressedKV, cfg: AttentionConfig) -> AttentionOutput:
    """Softmax attention over fully formed pooled blocks (block end <= t+1).

    Token t attends the ``(t+1) // B_K`` completed pooled rows; tokens before
    the first completed block attend their single pooled prefix row, whose
    softmax weight is 1.
    """
    Q = as_headed(Q, cfg.N, cfg.d_K, cfg.h, "Q")
    if cmp.K_cmp.shape != (cfg.b, cfg.d_K, cfg.h_K):
        raise ValueError(f"shape mismatch for K_cmp: got {cmp.K_cmp.shape}")
    n_formed = (np.arange(cfg.N) + 1) // cfg.B_K
    formed = n_formed > 0
    pending = np.nonzero(~formed)[0]
    blocks = np.arange(cfg.b)
    out = np.empty((cfg.N, cfg.d_V, cfg.h))
    lse = np.empty((cfg.h, cfg.N))
    for j in range(cfg.h):
        kh = j // cfg.g
        z = (Q[formed, :, j] @ cmp.K_cmp[:, :, kh].T) * cfg.scale
        z = np.where(blocks[None, :] < n_formed[formed][:, None], z, -np.inf)
        m = z.max(axis=1)
        p = np.exp(z - m[:, None])
        l = p.sum(axis=1)
        out[formed, :, j] = (p / l[:, None]) @ cmp.V_cmp[:, :, kh]
        lse[j, formed] = m + np.log(l)
        if pending.size:
            logit = np.einsum(
                "td,td->t", Q[pending, :, j], cmp.K_prefix[pending, :, kh]
            ) * cfg.scale
            out[pending, :, j] = cmp.V_prefix[pending, :, kh]
            lse[j, pending] = logit
    return AttentionOutput(out=out, lse=lse)


def sliding_attention_forward(Q, K, V, cfg: AttentionConfig) -> AttentionOutput:
    """Causal attention restricted to the last W positions."""
    return masked_attention_forward(Q, K, V, band_mask(cfg, cfg.W), cfg)


def validate_gates(tau: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.shape != (cfg.N, 3):
        raise ValueError(f"shape mismatch for gates: expected {(cfg.N, 3)}, got {tau.shape}")
    if (tau < 0).any() or (tau > 1).any():
        raise ValueError("gate values must lie in [0, 1]")
    return tau


def gated_combine(outs, tau: np.ndarray, cfg: AttentionConfig) -> AttentionOutput:
    """Per-token gated sum of the (compressed, selected, sliding) outputs."""
    tau = validate_gates(tau, cfg)
    if len(outs) != 3:
        raise ValueError("expected exactly three branch outputs")
    shapes = {o.out.shape for o in outs}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch across branches: {sorted(shapes)}")
    combined = sum(tau[:, c][:, None, None] * outs[c].out for c in range(3))
    return AttentionOutput(out=combined, lse=np.full((cfg.h, cfg.N), np.nan))
