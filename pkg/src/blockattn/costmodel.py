"""Closed-form memory-traffic/FLOP model and measured-counter aggregation.

All analytic formulas assume the uniform head dimension d = d_K = d_V and are
stated for 2-byte elements; byte totals scale linearly with
``bytes_per_elem / 2``. FLOPs are element-width independent.

KV-block-major engine, per component (bytes at 2 B/elem):

    selected kernel : 4*d*h*N*(1+T) bytes,   4*d*h*N*B_K*T FLOPs
    stats kernel    : 2*d*h_K*N*(1+T) bytes, 2*d*h_K*N*B_K*T FLOPs
    reduction kernel: 2*d*h*N*(1+T) bytes,   ~0 FLOPs

    total: d*N*(6h + 2h_K)*(1+T) bytes, d*N*B_K*T*(4h + 2h_K) FLOPs

Query-major engine:

    bytes: 2*d*h_K*N*(B_K*T + g + min_tile)

The T/2 average causal-skip factor is already folded into the byte total
(T/2 loaded blocks of 2*B_K*d elements each). Two FLOP totals are reported
side by side because they disagree by 2x and neither can be reconciled with
the other: ``flops_stated`` = 32*d*h_K*N*B_K*T (the as-published constant),
and ``flops_rederived`` = 2*max(g, min_tile)*d*h_K*N*B_K*T (per-step tile
cost times the T/2 average step count). Ratios use the stated total.
"""

from __future__ import annotations

import dataclasses

from .config import AttentionConfig, ConfigError
from .meter import TrafficMeter

CSV_COLUMNS = (
    "g", "B_K", "T", "N", "d",
    "fsa_bytes", "nsa_bytes", "memory_ratio",
    "fsa_flops", "nsa_flops", "flops_ratio",
    "source", "nsa_flops_rederived",
)


@dataclasses.dataclass
class CostBreakdown:
    fsa_bytes: int
    fsa_flops: int
    nsa_bytes: int
    nsa_flops: int
    fsa_components: dict[str, dict[str, int]]
    nsa_flops_rederived: int
    memory_ratio: float
    flops_ratio: float


def _scaled(bytes_at_2: int, cfg: AttentionConfig) -> int:
    return bytes_at_2 * cfg.bytes_per_elem // 2


def kv_major_analytic_cost(cfg: AttentionConfig) -> dict[str, dict[str, int]]:
    """Per-component analytic cost of the KV-block-major engine.

    Returns {"selected": {...}, "stats": {...}, "reduce": {...},
    "total": {...}} with "bytes" and "flops" entries each.
    """
    d = cfg.d  # raises on non-uniform head dims
    base = d * cfg.N * (1 + cfg.T)
    comps = {
        "selected": {
            "bytes": _scaled(4 * cfg.h * base, cfg),
            "flops": 4 * d * cfg.h * cfg.N * cfg.B_K * cfg.T,
        },
        "stats": {
            "bytes": _scaled(2 * cfg.h_K * base, cfg),
            "flops": 2 * d * cfg.h_K * cfg.N * cfg.B_K * cfg.T,
        },
        "reduce": {
            "bytes": _scaled(2 * cfg.h * base, cfg),
            "flops": 0,
        },
    }
    comps["total"] = {
        "bytes": sum(c["bytes"] for k, c in comps.items() if k != "total"),
        "flops": sum(c["flops"] for k, c in comps.items() if k != "total"),
    }
    return comps


def query_major_analytic_cost(cfg: AttentionConfig) -> dict[str, int]:
    """Analytic cost of the query-major engine (bytes plus both FLOP totals)."""
    d = cfg.d
    bytes_at_2 = 2 * d * cfg.h_K * cfg.N * (cfg.B_K * cfg.T + cfg.g + cfg.min_tile)
    pad = max(cfg.g, cfg.min_tile)
    return {
        "bytes": _scaled(bytes_at_2, cfg),
        "flops_stated": 32 * d * cfg.h_K * cfg.N * cfg.B_K * cfg.T,
        "flops_rederived": 2 * pad * d * cfg.h_K * cfg.N * cfg.B_K * cfg.T,
    }


def cost_ratio(cfg: AttentionConfig) -> tuple[float, float]:
    """(memory_ratio, flops_ratio) of KV-block-major to query-major totals."""
    fsa = kv_major_analytic_cost(cfg)["total"]
    nsa = query_major_analytic_cost(cfg)
    return fsa["bytes"] / nsa["bytes"], fsa["flops"] / nsa["flops_stated"]


def analytic_breakdown(cfg: AttentionConfig) -> CostBreakdown:
    fsa = kv_major_analytic_cost(cfg)
    nsa = query_major_analytic_cost(cfg)
    mem_ratio, flops_ratio = cost_ratio(cfg)
    return CostBreakdown(
        fsa_bytes=fsa["total"]["bytes"],
        fsa_flops=fsa["total"]["flops"],
        nsa_bytes=nsa["bytes"],
        nsa_flops=nsa["flops_stated"],
        fsa_components={k: v for k, v in fsa.items() if k != "total"},
        nsa_flops_rederived=nsa["flops_rederived"],
        memory_ratio=mem_ratio,
        flops_ratio=flops_ratio,
    )


_PHASE_TO_COMPONENT = {"block_pass": "selected", "stats": "stats", "reduce": "reduce"}


def measured_cost(meter: TrafficMeter) -> dict[str, dict[str, int]]:
    """Per-component measured totals (bytes = loaded + stored) from a meter."""
    comps: dict[str, dict[str, int]] = {}
    for phase, counters in meter.phases.items():
        name = _PHASE_TO_COMPONENT.get(phase, phase)
        comps[name] = {"bytes": counters.bytes_total, "flops": counters.flops}
    comps["total"] = {
        "bytes": sum(c["bytes"] for k, c in comps.items() if k != "total"),
        "flops": sum(c["flops"] for k, c in comps.items() if k != "total"),
    }
    return comps


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".12g")
    return str(x)


def csv_row(cfg: AttentionConfig, *, source: str,
            fsa_bytes: int, nsa_bytes: int, fsa_flops: int, nsa_flops: int,
            nsa_flops_rederived: int) -> dict[str, str]:
    if nsa_bytes <= 0 or nsa_flops <= 0:
        raise ConfigError("query-major totals must be positive")
    vals = {
        "g": cfg.g, "B_K": cfg.B_K, "T": cfg.T, "N": cfg.N, "d": cfg.d,
        "fsa_bytes": fsa_bytes, "nsa_bytes": nsa_bytes,
        "memory_ratio": fsa_bytes / nsa_bytes,
        "fsa_flops": fsa_flops, "nsa_flops": nsa_flops,
        "flops_ratio": fsa_flops / nsa_flops,
        "source": source,
        "nsa_flops_rederived": nsa_flops_rederived,
    }
    return {k: _fmt(vals[k]) for k in CSV_COLUMNS}


def analytic_csv_row(cfg: AttentionConfig) -> dict[str, str]:
    bd = analytic_breakdown(cfg)
    return csv_row(
        cfg, source="analytic",
        fsa_bytes=bd.fsa_bytes, nsa_bytes=bd.nsa_bytes,
        fsa_flops=bd.fsa_flops, nsa_flops=bd.nsa_flops,
        nsa_flops_rederived=bd.nsa_flops_rederived,
    )
