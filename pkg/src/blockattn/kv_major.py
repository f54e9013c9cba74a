"""KV-block-major selected-attention engine.

Three forward passes, mirroring the simulated kernels:

1. ``compute_softmax_stats`` — per (KV head, block) tasks produce per-row
   partial (max, exp-sum) statistics that are merged in ascending block order
   into exact per-(query head, token) softmax statistics.
2. ``block_pass_forward`` — per (query head, block) tasks load the KV block
   once, gather the attending query rows through the inverse index, and write
   unnormalized partial rows exp(z - m) @ V into disjoint buffer regions.
3. ``reduce_forward`` — per (query head, token) the partial rows are summed
   in ascending block order and divided once by the exp-sum.

The backward pass reuses the forward inverse index, recomputes statistics and
outputs, accumulates dK/dV locally per (head, block) task (each task is the
unique writer of its partial region), and reduces dQ partials from a gradient
buffer in ascending block order. No pass ever needs atomic accumulation.

Traffic accounting follows the conventions in :mod:`blockattn.meter`. The
``stats`` phase is metered per KV head (the amortized schedule), regardless
of the numerically exact per-query-head statistics it returns. Backward adds
to the same three phases: the forward recomputation is metered normally, the
backward block tasks land in ``block_pass`` (loads: KV block, gathered q/dOut
rows, three scalars per row; stores: dq partial rows plus the task's dK/dV
region), and the dQ reduction, delta precomputation, and per-group dK/dV
summation land in ``reduce``.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import _kernels
from .config import AttentionConfig, as_headed
from .meter import TrafficMeter
from .oracle import AttentionOutput
from .selection import InverseIndex, SelectionTensor, build_inverse_index


@dataclasses.dataclass
class SoftmaxStats:
    """Per (query head, token) running max and exp-sum of selected logits."""

    m: np.ndarray  # (h, N)
    l: np.ndarray  # (h, N)


@dataclasses.dataclass
class OutputBuffer:
    """Per (query head, block) regions of unnormalized partial output rows.

    ``rows[j][i]`` is None for early-returned tasks, else an (n_valid, d_V)
    array whose row order is the slot order of the inverse index. Distinct
    tasks own disjoint regions; a second write to a region raises.
    """

    rows: list[list[np.ndarray | None]]

    def write(self, j: int, i: int, region: np.ndarray, reserved: int) -> None:
        if region.shape[0] > reserved:
            raise ValueError(
                f"buffer overflow: task ({j}, {i}) wrote {region.shape[0]} rows "
                f"into a region reserved for {reserved}"
            )
        if self.rows[j][i] is not None:
            raise ValueError(f"buffer region ({j}, {i}) written twice")
        self.rows[j][i] = region

    @property
    def peak_elements(self) -> int:
        """Largest per-head element footprint (one head set processed at a time)."""
        return max(
            sum(r.size for r in per_head if r is not None) for per_head in self.rows
        )


def _contig_heads(X: np.ndarray, h: int) -> list[np.ndarray]:
    return [np.ascontiguousarray(X[:, :, j]) for j in range(h)]


def _valid_counts(rows: np.ndarray, i: int, B_K: int) -> np.ndarray:
    """Visible key count per gathered row: whole block, or causal prefix."""
    own = rows // B_K
    return np.where(own > i, B_K, rows - i * B_K + 1).astype(np.int32)


def _meter_stats_phase(inv: InverseIndex, cfg: AttentionConfig, meter: TrafficMeter) -> None:
    ph = meter.phase("stats")
    bpe = cfg.bytes_per_elem
    for kh in range(cfg.h_K):
        for i in range(cfg.b):
            ph.task_count += 1
            n = int(inv.n_valid[kh, i])
            if n == 0:
                continue
            iters = -(-n // cfg.B_Q)
            ph.inner_iterations += iters
            ph.bytes_loaded += (cfg.B_K * cfg.d_K + n * cfg.d_K) * bpe
            ph.bytes_stored += n * bpe
            ph.flops += 2 * iters * cfg.B_Q * cfg.B_K * cfg.d_K


def compute_softmax_stats(
    Q: np.ndarray,
    K: np.ndarray,
    sel: SelectionTensor,
    cfg: AttentionConfig,
    *,
    shared_max: bool = False,
    meter: TrafficMeter | None = None,
) -> SoftmaxStats:
    """Exact per-(head, token) max and exp-sum over the selected logits.

    With ``shared_max`` the per-token maximum is shared across each KV head
    group (the amortized variant) and the exp-sums are rescaled accordingly;
    outputs downstream are unchanged up to floating-point shift invariance.
    """
    Q = as_headed(Q, cfg.N, cfg.d_K, cfg.h, "Q")
    K = as_headed(K, cfg.N, cfg.d_K, cfg.h_K, "K")
    inv = build_inverse_index(sel, cfg)
    kern = _kernels.active()
    m = np.full((cfg.h, cfg.N), -np.inf)
    l = np.zeros((cfg.h, cfg.N))
    K_heads = _contig_heads(K, cfg.h_K)
    for j in range(cfg.h):
        kh = j // cfg.g
        Qj = np.ascontiguousarray(Q[:, :, j])
        for i in range(cfg.b):
            rows = inv.queries[kh][i]
            if rows.size == 0:
                continue
            qg = Qj[rows]
            kb = K_heads[kh][i * cfg.B_K : (i + 1) * cfg.B_K]
            m_part, l_part = kern.block_stats(qg, kb, cfg.scale, _valid_counts(rows, i, cfg.B_K))
            m_old = m[j, rows]
            m_new = np.maximum(m_old, m_part)
            l[j, rows] = l[j, rows] * np.exp(m_old - m_new) + l_part * np.exp(m_part - m_new)
            m[j, rows] = m_new
    if shared_max:
        for kh in range(cfg.h_K):
            grp = slice(kh * cfg.g, (kh + 1) * cfg.g)
            m_sh = m[grp].max(axis=0)
            l[grp] *= np.exp(m[grp] - m_sh[None, :])
            m[grp] = m_sh[None, :]
    if meter is not None:
        _meter_stats_phase(inv, cfg, meter)
    return SoftmaxStats(m=m, l=l)


def block_pass_forward(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    inv: InverseIndex,
    stats: SoftmaxStats,
    cfg: AttentionConfig,
    *,
    meter: TrafficMeter | None = None,
    task_order=None,
) -> OutputBuffer:
    """Run the per-(query head, KV block) tasks; early return on empty tasks.

    ``task_order`` permutes task execution (testing hook); outputs are
    bit-identical for any order because buffer regions are disjoint.
    """
    Q = as_headed(Q, cfg.N, cfg.d_K, cfg.h, "Q")
    K = as_headed(K, cfg.N, cfg.d_K, cfg.h_K, "K")
    V = as_headed(V, cfg.N, cfg.d_V, cfg.h_K, "V")
    kern = _kernels.active()
    buf = OutputBuffer(rows=[[None] * cfg.b for _ in range(cfg.h)])
    tasks = [(j, i) for j in range(cfg.h) for i in range(cfg.b)]
    if task_order is not None:
        tasks = [tasks[t] for t in task_order]
        if sorted(tasks) != [(j, i) for j in range(cfg.h) for i in range(cfg.b)]:
            raise ValueError("task_order must be a permutation of all tasks")
    ph = meter.phase("block_pass") if meter is not None else None
    bpe = cfg.bytes_per_elem
    Q_heads = _contig_heads(Q, cfg.h)
    K_heads = _contig_heads(K, cfg.h_K)
    V_heads = _contig_heads(V, cfg.h_K)
    for j, i in tasks:
        kh = j // cfg.g
        n = int(inv.n_valid[kh, i])
        if ph is not None:
            ph.task_count += 1
        if n == 0:
            continue  # early return: no loads, no flops
        rows = inv.queries[kh][i]
        qg = Q_heads[j][rows]
        kb = K_heads[kh][i * cfg.B_K : (i + 1) * cfg.B_K]
        vb = V_heads[kh][i * cfg.B_K : (i + 1) * cfg.B_K]
        region = kern.block_partial(
            qg, kb, vb, stats.m[j, rows], cfg.scale, _valid_counts(rows, i, cfg.B_K)
        )
        buf.write(j, i, region, reserved=n)
        if ph is not None:
            iters = -(-n // cfg.B_Q)
            ph.inner_iterations += iters
            ph.bytes_loaded += (cfg.B_K * (cfg.d_K + cfg.d_V) + n * cfg.d_K + n) * bpe
            ph.bytes_stored += n * cfg.d_V * bpe
            ph.flops += 2 * iters * cfg.B_Q * cfg.B_K * (cfg.d_K + cfg.d_V)
    return buf


def reduce_forward(
    buf: OutputBuffer,
    inv: InverseIndex,
    stats: SoftmaxStats,
    cfg: AttentionConfig,
    *,
    meter: TrafficMeter | None = None,
) -> AttentionOutput:
    """Sum partial rows in ascending block order and normalize by the exp-sum."""
    out = np.zeros((cfg.N, cfg.d_V, cfg.h))
    for j in range(cfg.h):
        kh = j // cfg.g
        acc = np.zeros((cfg.N, cfg.d_V))
        for i in range(cfg.b):
            region = buf.rows[j][i]
            if region is None:
                if inv.n_valid[kh, i] != 0:
                    raise ValueError(f"missing buffer region for task ({j}, {i})")
                continue
            acc[inv.queries[kh][i]] += region
        out[:, :, j] = acc / stats.l[j][:, None]
    lse = stats.m + np.log(stats.l)
    if meter is not None:
        ph = meter.phase("reduce")
        bpe = cfg.bytes_per_elem
        row_len = np.zeros((cfg.h_K, cfg.N), dtype=np.int64)
        for kh in range(cfg.h_K):
            for i in range(cfg.b):
                row_len[kh][inv.queries[kh][i]] += 1
        for j in range(cfg.h):
            lens = row_len[j // cfg.g]
            ph.task_count += cfg.N
            ph.inner_iterations += int(lens.sum())
            ph.bytes_loaded += int((lens.sum() * cfg.d_V + cfg.N) * bpe)
            ph.bytes_stored += cfg.N * cfg.d_V * bpe
    return AttentionOutput(out=out, lse=lse)


def selected_forward(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    sel: SelectionTensor,
    cfg: AttentionConfig,
    *,
    shared_max: bool = False,
    task_order=None,
) -> tuple[AttentionOutput, TrafficMeter]:
    """Composition of the stats, block, and reduction passes."""
    meter = TrafficMeter()
    inv = build_inverse_index(sel, cfg)
    stats = compute_softmax_stats(Q, K, sel, cfg, shared_max=shared_max, meter=meter)
    buf = block_pass_forward(Q, K, V, inv, stats, cfg, meter=meter, task_order=task_order)
    result = reduce_forward(buf, inv, stats, cfg, meter=meter)
    return result, meter


def selected_backward(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    sel: SelectionTensor,
    dOut: np.ndarray,
    cfg: AttentionConfig,
    *,
    shared_max: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, TrafficMeter]:
    """Gradients of sum(selected_forward(...).out * dOut) w.r.t. Q, K, V."""
    dOut = as_headed(dOut, cfg.N, cfg.d_V, cfg.h, "dOut")
    meter = TrafficMeter()
    inv = build_inverse_index(sel, cfg)
    stats = compute_softmax_stats(Q, K, sel, cfg, shared_max=shared_max, meter=meter)
    buf = block_pass_forward(Q, K, V, inv, stats, cfg, meter=meter)
    fwd = reduce_forward(buf, inv, stats, cfg, meter=meter)

    kern = _kernels.active()
    bpe = cfg.bytes_per_elem
    delta = np.einsum("tvj,tvj->jt", fwd.out, dOut)  # (h, N)
    ph_reduce = meter.phase("reduce")
    ph_reduce.bytes_loaded += 2 * cfg.h * cfg.N * cfg.d_V * bpe
    ph_reduce.bytes_stored += cfg.h * cfg.N * bpe

    Q_heads = _contig_heads(Q, cfg.h)
    K_heads = _contig_heads(K, cfg.h_K)
    V_heads = _contig_heads(V, cfg.h_K)
    dO_heads = _contig_heads(dOut, cfg.h)

    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    # per-(head, block) partial regions: each task is its region's only writer
    dq_buf: list[list[np.ndarray | None]] = [[None] * cfg.b for _ in range(cfg.h)]
    dk_part: list[list[np.ndarray | None]] = [[None] * cfg.b for _ in range(cfg.h)]
    dv_part: list[list[np.ndarray | None]] = [[None] * cfg.b for _ in range(cfg.h)]
    ph = meter.phase("block_pass")
    for j in range(cfg.h):
        kh = j // cfg.g
        for i in range(cfg.b):
            ph.task_count += 1
            n = int(inv.n_valid[kh, i])
            if n == 0:
                continue
            rows = inv.queries[kh][i]
            qg = Q_heads[j][rows]
            kb = K_heads[kh][i * cfg.B_K : (i + 1) * cfg.B_K]
            vb = V_heads[kh][i * cfg.B_K : (i + 1) * cfg.B_K]
            dq_rows, dk_blk, dv_blk = kern.block_backward(
                qg, kb, vb, dO_heads[j][rows], stats.m[j, rows], stats.l[j, rows],
                delta[j, rows], cfg.scale, _valid_counts(rows, i, cfg.B_K),
            )
            dq_buf[j][i] = dq_rows
            dk_part[j][i] = dk_blk
            dv_part[j][i] = dv_blk
            iters = -(-n // cfg.B_Q)
            ph.inner_iterations += iters
            ph.bytes_loaded += (cfg.B_K * (cfg.d_K + cfg.d_V) + n * (cfg.d_K + cfg.d_V) + 3 * n) * bpe
            ph.bytes_stored += (n * cfg.d_K + cfg.B_K * (cfg.d_K + cfg.d_V)) * bpe
            ph.flops += 2 * iters * cfg.B_Q * cfg.B_K * (3 * cfg.d_K + 2 * cfg.d_V)

    # dQ: reduce the gradient buffer in ascending block order
    for j in range(cfg.h):
        kh = j // cfg.g
        acc = np.zeros((cfg.N, cfg.d_K))
        for i in range(cfg.b):
            if dq_buf[j][i] is not None:
                acc[inv.queries[kh][i]] += dq_buf[j][i]
        dQ[:, :, j] = acc
        lens = np.zeros(cfg.N, dtype=np.int64)
        for i in range(cfg.b):
            lens[inv.queries[kh][i]] += 1
        ph_reduce.task_count += cfg.N
        ph_reduce.inner_iterations += int(lens.sum())
        ph_reduce.bytes_loaded += int(lens.sum()) * cfg.d_K * bpe
        ph_reduce.bytes_stored += cfg.N * cfg.d_K * bpe

    # dK/dV: fixed-order (ascending head) sum of the per-task partial regions
    for kh in range(cfg.h_K):
        for i in range(cfg.b):
            blk = slice(i * cfg.B_K, (i + 1) * cfg.B_K)
            touched = False
            for j in range(kh * cfg.g, (kh + 1) * cfg.g):
                if dk_part[j][i] is not None:
                    dK[blk, :, kh] += dk_part[j][i]
                    dV[blk, :, kh] += dv_part[j][i]
                    touched = True
            if touched:
                ph_reduce.bytes_loaded += cfg.g * cfg.B_K * (cfg.d_K + cfg.d_V) * bpe
                ph_reduce.bytes_stored += cfg.B_K * (cfg.d_K + cfg.d_V) * bpe
    return dQ, dK, dV, meter
