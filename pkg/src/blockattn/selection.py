"""Sparse KV-block selection and its inverse index.

The selection tensor records, per (KV head, query token), the ascending list
of selected KV block indices, padded with ``-1`` sentinels. The inverse index
flips that relation: per (KV head, KV block) it lists the attending query
tokens and assigns each a compact output-buffer slot.

Structural validity (entries causal, strictly increasing, rows nonempty) is
what the engines require. Membership of the query's own block is a guarantee
of the :func:`select_topk_blocks` policy, not a structural requirement, so
hand-built selections that concentrate queries elsewhere remain executable.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np

from .config import AttentionConfig

SENTINEL = -1


class SelectionError(ValueError):
    """Raised for a malformed selection tensor."""


@dataclasses.dataclass
class SelectionTensor:
    """idx has shape (h_K, N, T), int32, ascending entries then sentinels."""

    idx: np.ndarray

    def __post_init__(self):
        self.idx = np.asarray(self.idx, dtype=np.int32)
        if self.idx.ndim != 3:
            raise SelectionError("malformed selection: idx must be 3-d (h_K, N, T)")

    def row_lengths(self) -> np.ndarray:
        """Non-sentinel entry count per (kh, t), shape (h_K, N)."""
        return (self.idx != SENTINEL).sum(axis=2)

    def nnz(self) -> int:
        return int((self.idx != SENTINEL).sum())


def validate_selection(sel: SelectionTensor, cfg: AttentionConfig) -> None:
    """Raise SelectionError unless sel is structurally executable."""
    idx = sel.idx
    h_K, N, T = idx.shape
    if (h_K, N, T) != (cfg.h_K, cfg.N, cfg.T):
        raise SelectionError(
            f"malformed selection: shape {idx.shape} != {(cfg.h_K, cfg.N, cfg.T)}"
        )
    valid = idx != SENTINEL
    if not valid[:, :, 0].all():
        raise SelectionError("malformed selection: empty row")
    if T > 1:
        # no valid entry may follow a sentinel
        if (valid[:, :, 1:] & ~valid[:, :, :-1]).any():
            raise SelectionError("malformed selection: entry after sentinel")
    if ((idx < 0) & valid).any() or (idx >= cfg.b).any():
        raise SelectionError("malformed selection: block index out of range")
    own = (np.arange(N, dtype=np.int32) // cfg.B_K)[None, :, None]
    if (valid & (idx > own)).any():
        raise SelectionError("malformed selection: non-causal entry")
    if T > 1:
        both = valid[:, :, 1:] & valid[:, :, :-1]
        diffs = idx[:, :, 1:] - idx[:, :, :-1]
        if (both & (diffs == 0)).any():
            raise SelectionError("malformed selection: duplicate entry")
        if (both & (diffs < 0)).any():
            raise SelectionError("malformed selection: not strictly increasing")


def select_topk_blocks(scores: np.ndarray, cfg: AttentionConfig) -> SelectionTensor:
    """Pick, per (kh, t), the token's own block plus the top-(T-1) causal blocks.

    Ties break toward the lower block index; scores of non-causal blocks are
    ignored; rows with fewer than T causal blocks are sentinel-padded.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (cfg.h_K, cfg.N, cfg.b):
        raise ValueError(
            f"shape mismatch for scores: expected {(cfg.h_K, cfg.N, cfg.b)}, got {scores.shape}"
        )
    own = np.arange(cfg.N) // cfg.B_K  # (N,)
    blocks = np.arange(cfg.b)
    masked = np.where(blocks[None, None, :] <= own[None, :, None], scores, -np.inf)
    # forcing the own block to +inf puts it first under any scores
    masked[:, np.arange(cfg.N), own] = np.inf
    # stable sort on the negated scores: descending score, ties -> lower index
    order = np.argsort(-masked, axis=2, kind="stable")[:, :, : cfg.T]
    picked_scores = np.take_along_axis(masked, order, axis=2)
    rows = np.where(picked_scores > -np.inf, order, np.iinfo(np.int32).max)
    rows.sort(axis=2)
    rows = np.where(rows == np.iinfo(np.int32).max, SENTINEL, rows)
    sel = SelectionTensor(rows.astype(np.int32))
    validate_selection(sel, cfg)
    return sel


def importance_scores_from_compressed(
    Q: np.ndarray, K_cmp: np.ndarray, cfg: AttentionConfig
) -> np.ndarray:
    """Group-mean compressed logits: scores[kh, t, i] = mean_j Q[t,:,j]·K_cmp[i,:,kh]/sqrt(d_K)."""
    Q = np.asarray(Q, dtype=np.float64)
    K_cmp = np.asarray(K_cmp, dtype=np.float64)
    if Q.shape != (cfg.N, cfg.d_K, cfg.h):
        raise ValueError(f"shape mismatch for Q: got {Q.shape}")
    if K_cmp.shape != (cfg.b, cfg.d_K, cfg.h_K):
        raise ValueError(f"shape mismatch for K_cmp: got {K_cmp.shape}")
    scores = np.empty((cfg.h_K, cfg.N, cfg.b))
    for kh in range(cfg.h_K):
        group = Q[:, :, kh * cfg.g : (kh + 1) * cfg.g]  # (N, d_K, g)
        # mean over group heads of the per-head logits
        scores[kh] = np.einsum("tdg,bd->tb", group, K_cmp[:, :, kh]) * (cfg.scale / cfg.g)
    return scores


@dataclasses.dataclass
class InverseIndex:
    """Per (kh, block): sorted attending queries and their buffer slots.

    ``queries[kh][i]`` is the ascending int32 array of attending tokens; the
    slot of token t is its position in that array (prefix-compacted), so
    ``n_valid[kh, i] == len(queries[kh][i])``.
    """

    queries: list[list[np.ndarray]]
    n_valid: np.ndarray  # (h_K, b) int64

    def slots(self, kh: int, i: int) -> dict[int, int]:
        return {int(t): s for s, t in enumerate(self.queries[kh][i])}

    def slot_of(self, kh: int, i: int, t: int) -> int:
        q = self.queries[kh][i]
        s = int(np.searchsorted(q, t))
        if s >= len(q) or q[s] != t:
            raise KeyError(f"token {t} does not attend block {i} of KV head {kh}")
        return s


def build_inverse_index(sel: SelectionTensor, cfg: AttentionConfig) -> InverseIndex:
    """Invert the selection tensor; memoized on the selection object.

    The result is canonical (queries ascending, slots in ascending query
    order) and therefore independent of any processing order.
    """
    cached = getattr(sel, "_inverse_cache", None)
    if cached is not None:
        return cached
    validate_selection(sel, cfg)
    queries: list[list[np.ndarray]] = []
    n_valid = np.zeros((cfg.h_K, cfg.b), dtype=np.int64)
    for kh in range(cfg.h_K):
        per_block: list[list[int]] = [[] for _ in range(cfg.b)]
        idx = sel.idx[kh]
        ts, slots = np.nonzero(idx != SENTINEL)
        for t, s in zip(ts.tolist(), slots.tolist()):
            per_block[idx[t, s]].append(t)
        arrays = [np.array(sorted(lst), dtype=np.int32) for lst in per_block]
        queries.append(arrays)
        n_valid[kh] = [len(a) for a in arrays]
    inv = InverseIndex(queries, n_valid)
    sel._inverse_cache = inv
    return inv


def selection_from_inverse(inv: InverseIndex, cfg: AttentionConfig) -> SelectionTensor:
    """Rebuild the canonical selection tensor from an inverse index."""
    idx = np.full((cfg.h_K, cfg.N, cfg.T), SENTINEL, dtype=np.int32)
    fill = np.zeros((cfg.h_K, cfg.N), dtype=np.int64)
    for kh in range(cfg.h_K):
        for i in range(cfg.b):
            for t in inv.queries[kh][i].tolist():
                idx[kh, t, fill[kh, t]] = i
                fill[kh, t] += 1
    return SelectionTensor(idx)


def self_block_selection(cfg: AttentionConfig) -> SelectionTensor:
    """Every row selects only the token's own block."""
    idx = np.full((cfg.h_K, cfg.N, cfg.T), SENTINEL, dtype=np.int32)
    idx[:, :, 0] = np.arange(cfg.N) // cfg.B_K
    return SelectionTensor(idx)


def full_selection(cfg: AttentionConfig) -> SelectionTensor:
    """Every row selects all causal blocks; requires T == b."""
    if cfg.T != cfg.b:
        raise ValueError(f"full selection needs T == b (T={cfg.T}, b={cfg.b})")
    own = np.arange(cfg.N) // cfg.B_K
    cols = np.arange(cfg.b)
    idx = np.where(cols[None, :] <= own[:, None], cols[None, :], SENTINEL)
    return SelectionTensor(np.broadcast_to(idx, (cfg.h_K, cfg.N, cfg.T)).astype(np.int32))


def save_selection(sel: SelectionTensor, path) -> None:
    """Flat binary fixture: int32 header (h_K, N, T), then the row-major int32 body."""
    h_K, N, T = sel.idx.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", h_K, N, T))
        fh.write(np.ascontiguousarray(sel.idx, dtype="<i4").tobytes())


def load_selection(path) -> SelectionTensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise SelectionError("malformed selection: truncated fixture header")
    h_K, N, T = struct.unpack("<3i", raw[:12])
    body = np.frombuffer(raw[12:], dtype="<i4")
    if h_K < 1 or N < 1 or T < 1 or body.size != h_K * N * T:
        raise SelectionError("malformed selection: fixture size mismatch")
    return SelectionTensor(body.reshape(h_K, N, T).astype(np.int32))
