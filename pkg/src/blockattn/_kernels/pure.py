"""Pure-numpy fallback kernels.

Same contracts as the compiled core in ``_core.pyx``; selected at import by
``blockattn._kernels`` when the extension is unavailable. All inputs are
C-contiguous float64 arrays; ``valid`` gives, per gathered row, the number of
leading key positions of the block that are causally visible.
"""

from __future__ import annotations

import numpy as np

NAME = "pure"


def _masked_logits(qg, kb, scale, valid):
    z = (qg @ kb.T) * scale
    cols = np.arange(kb.shape[0])
    return np.where(cols[None, :] < valid[:, None], z, -np.inf)


def block_stats(qg, kb, scale, valid):
    """Per-row max and exp-sum of the masked logits against one KV block."""
    z = _masked_logits(qg, kb, scale, valid)
    m = z.max(axis=1)
    l = np.exp(z - m[:, None]).sum(axis=1)
    return m, l


def block_partial(qg, kb, vb, m_rows, scale, valid):
    """Unnormalized partial rows exp(z - m) @ V for one (head, block) task."""
    z = _masked_logits(qg, kb, scale, valid)
    p = np.exp(z - m_rows[:, None])
    return p @ vb


def block_backward(qg, kb, vb, dog, m_rows, l_rows, delta, scale, valid):
    """Gradient contributions of one (head, block) task.

    Returns (dq_rows, dk_block, dv_block) where dq_rows are the gathered
    queries' partials for this block and dk/dv cover the whole block.
    """
    z = _masked_logits(qg, kb, scale, valid)
    p = np.exp(z - m_rows[:, None])
    p /= l_rows[:, None]
    dv = p.T @ dog
    dp = dog @ vb.T
    dz = p * (dp - delta[:, None])
    dq = (dz @ kb) * scale
    dk = (dz.T @ qg) * scale
    return dq, dk, dv


def query_forward_head(qh, ks, vs, rows, scale, block_size):
    """Query-major online-softmax forward for one KV head.

    qh: (N, g, d_K); ks: (N, d_K); vs: (N, d_V); rows: (N, T) int32 with -1
    sentinels, ascending. Returns (out (N, g, d_V), m (N, g), l (N, g)).
    """
    N, g, _ = qh.shape
    d_V = vs.shape[1]
    out = np.zeros((N, g, d_V))
    m = np.full((N, g), -np.inf)
    l = np.zeros((N, g))
    for t in range(N):
        q = qh[t]
        m_run = np.full(g, -np.inf)
        l_run = np.zeros(g)
        acc = np.zeros((g, d_V))
        for i in rows[t]:
            if i < 0:
                break
            start = int(i) * block_size
            if start > t:
                continue  # causal skip
            end = min(start + block_size, t + 1)
            z = (q @ ks[start:end].T) * scale
            m_new = np.maximum(m_run, z.max(axis=1))
            w = np.exp(m_run - m_new)
            p = np.exp(z - m_new[:, None])
            l_run = l_run * w + p.sum(axis=1)
            acc = acc * w[:, None] + p @ vs[start:end]
            m_run = m_new
        out[t] = acc / l_run[:, None]
        m[t] = m_run
        l[t] = l_run
    return out, m, l


def query_backward_head(qh, ks, vs, doh, rows, scale, block_size):
    """Query-major backward for one KV head, accumulating in ascending t.

    Returns (dqh (N, g, d_K), dks (N, d_K), dvs (N, d_V)).
    """
    N, g, d_K = qh.shape
    d_V = vs.shape[1]
    dqh = np.zeros((N, g, d_K))
    dks = np.zeros((N, d_K))
    dvs = np.zeros((N, d_V))
    out, m, l = query_forward_head(qh, ks, vs, rows, scale, block_size)
    for t in range(N):
        q = qh[t]
        do = doh[t]
        delta = (out[t] * do).sum(axis=1)
        for i in rows[t]:
            if i < 0:
                break
            start = int(i) * block_size
            if start > t:
                continue
            end = min(start + block_size, t + 1)
            z = (q @ ks[start:end].T) * scale
            p = np.exp(z - m[t][:, None]) / l[t][:, None]
            dvs[start:end] += p.T @ do
            dp = do @ vs[start:end].T
            dz = p * (dp - delta[:, None])
            dqh[t] += (dz @ ks[start:end]) * scale
            dks[start:end] += (dz.T @ q) * scale
    return dqh, dks, dvs
