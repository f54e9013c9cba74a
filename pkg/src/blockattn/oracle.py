"""Exact O(N^2) dense attention: the slow ground truth.

Forward paths materialize the full (N, N) logit matrix per head and apply a
numerically stable softmax; the backward path is the analytic gradient of the
masked attention contraction. No attempt is made at sub-quadratic cost.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import AttentionConfig, as_headed
from .selection import SelectionTensor

NEG_INF = -np.inf


@dataclasses.dataclass
class AttentionOutput:
    out: np.ndarray  # (N, d_V, h)
    lse: np.ndarray  # (h, N)


@dataclasses.dataclass
class BlockMask:
    """allow[kh, t, s] marks key position s visible to query t on KV head kh."""

    allow: np.ndarray


def causal_mask(cfg: AttentionConfig) -> BlockMask:
    t = np.arange(cfg.N)
    allow = (t[None, :, None] >= t[None, None, :]) & np.ones((cfg.h_K, 1, 1), dtype=bool)
    return BlockMask(allow)


def band_mask(cfg: AttentionConfig, width: int) -> BlockMask:
    """Sliding-window causal mask: s in [t - width + 1, t]."""
    t = np.arange(cfg.N)
    diff = t[None, :, None] - t[None, None, :]
    allow = (diff >= 0) & (diff < width) & np.ones((cfg.h_K, 1, 1), dtype=bool)
    return BlockMask(allow)


def mask_from_selection(sel: SelectionTensor, cfg: AttentionConfig) -> BlockMask:
    """Dense realization of a block selection, within-block causality included."""
    h_K, N, T = sel.idx.shape
    block_of = np.arange(N) // cfg.B_K
    allow = np.zeros((h_K, N, N), dtype=bool)
    sel_blocks = np.zeros((h_K, N, cfg.b), dtype=bool)
    for kh in range(h_K):
        for slot in range(T):
            col = sel.idx[kh, :, slot]
            ok = col >= 0
            sel_blocks[kh, np.nonzero(ok)[0], col[ok]] = True
        allow[kh] = sel_blocks[kh][:, block_of]
    causal = np.arange(N)[:, None] >= np.arange(N)[None, :]
    allow &= causal[None, :, :]
    return BlockMask(allow)


def _forward_head(Qj: np.ndarray, Kh: np.ndarray, Vh: np.ndarray, allow: np.ndarray,
                  scale: float):
    z = (Qj @ Kh.T) * scale
    z = np.where(allow, z, NEG_INF)
    m = z.max(axis=1)
    if not np.isfinite(m).all():
        raise ValueError("empty attention row")
    p = np.exp(z - m[:, None])
    l = p.sum(axis=1)
    out = (p / l[:, None]) @ Vh
    return out, m + np.log(l)


def full_attention_forward(Q, K, V, cfg: AttentionConfig) -> AttentionOutput:
    """Causal softmax attention over the whole history (query head j reads KV head j//g)."""
    return masked_attention_forward(Q, K, V, causal_mask(cfg), cfg)


def masked_attention_forward(Q, K, V, mask: BlockMask, cfg: AttentionConfig) -> AttentionOutput:
    """Softmax attention restricted to the allowed positions of ``mask``.

    Raises ValueError("empty attention row") if any query has no allowed key.
    """
    Q = as_headed(Q, cfg.N, cfg.d_K, cfg.h, "Q")
    K = as_headed(K, cfg.N, cfg.d_K, cfg.h_K, "K")
    V = as_headed(V, cfg.N, cfg.d_V, cfg.h_K, "V")
    if mask.allow.shape != (cfg.h_K, cfg.N, cfg.N):
        raise ValueError(f"shape mismatch for mask: got {mask.allow.shape}")
    out = np.empty((cfg.N, cfg.d_V, cfg.h))
    lse = np.empty((cfg.h, cfg.N))
    for j in range(cfg.h):
        kh = j // cfg.g
        out[:, :, j], lse[j] = _forward_head(
            Q[:, :, j], K[:, :, kh], V[:, :, kh], mask.allow[kh], cfg.scale
        )
    return AttentionOutput(out=out, lse=lse)


def dense_backward(Q, K, V, mask: BlockMask, dOut, cfg: AttentionConfig):
    """Analytic gradients of sum(masked_attention_forward(...).out * dOut).

    Returns (dQ, dK, dV) with the input layouts.
    """
    Q = as_headed(Q, cfg.N, cfg.d_K, cfg.h, "Q")
    K = as_headed(K, cfg.N, cfg.d_K, cfg.h_K, "K")
    V = as_headed(V, cfg.N, cfg.d_V, cfg.h_K, "V")
    dOut = as_headed(dOut, cfg.N, cfg.d_V, cfg.h, "dOut")
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    for j in range(cfg.h):
        kh = j // cfg.g
        allow = mask.allow[kh]
        z = (Q[:, :, j] @ K[:, :, kh].T) * cfg.scale
        z = np.where(allow, z, NEG_INF)
        m = z.max(axis=1)
        if not np.isfinite(m).all():
            raise ValueError("empty attention row")
        p = np.exp(z - m[:, None])
        p /= p.sum(axis=1)[:, None]
        do = dOut[:, :, j]
        dp = do @ V[:, :, kh].T
        delta = (p * dp).sum(axis=1)
        dz = p * (dp - delta[:, None])
        dQ[:, :, j] = (dz @ K[:, :, kh]) * cfg.scale
        dK[:, :, kh] += (dz.T @ Q[:, :, j]) * cfg.scale
        dV[:, :, kh] += p.T @ do
    return dQ, dK, dV
