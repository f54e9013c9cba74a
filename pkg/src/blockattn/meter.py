"""Exact per-phase traffic counters for simulated kernel executions.

A :class:`TrafficMeter` holds one :class:`PhaseCounters` record per kernel
phase. The KV-block-major engine reports phases ``stats``, ``block_pass`` and
``reduce``; the query-major engine reports a single ``query_major`` phase.
Counters are exact integer functions of (config, selection): they never
depend on tensor values, and merging meters is associative and commutative.

Accounting conventions (elements are multiplied by ``cfg.bytes_per_elem``):

* Loads and stores count tensor elements actually moved. Gathered loads
  (non-contiguous query batches) count only the gathered rows; KV blocks are
  always moved whole. Softmax statistics and per-row scalars count one
  element each.
* The query-major schedule pads its per-token head batch to
  ``max(g, min_tile)`` rows: padded query loads are counted as real traffic,
  while output stores are masked down to the ``g`` real heads.
* FLOPs count matrix multiplications only (2*m*n*k per product) at tile
  granularity: the KV-block-major engine runs ``ceil(n_valid / B_Q)`` full
  B_Q-row tiles per task, the query-major engine full padded head tiles.
  Elementwise exponentials and the reduction pass's additions are treated as
  negligible and contribute zero FLOPs, matching the analytic model.
* ``inner_iterations`` counts query-batch iterations for ``stats`` and
  ``block_pass``, selected-block steps for ``query_major``, and partial rows
  consumed for ``reduce``.
* ``task_count`` counts launched tasks, including tasks that return early
  with zero traffic.
"""

from __future__ import annotations

import dataclasses

PHASES = ("stats", "block_pass", "reduce", "query_major")


@dataclasses.dataclass
class PhaseCounters:
    bytes_loaded: int = 0
    bytes_stored: int = 0
    flops: int = 0
    task_count: int = 0
    inner_iterations: int = 0

    @property
    def bytes_total(self) -> int:
        return self.bytes_loaded + self.bytes_stored

    def merged(self, other: "PhaseCounters") -> "PhaseCounters":
        return PhaseCounters(
            self.bytes_loaded + other.bytes_loaded,
            self.bytes_stored + other.bytes_stored,
            self.flops + other.flops,
            self.task_count + other.task_count,
            self.inner_iterations + other.inner_iterations,
        )


@dataclasses.dataclass
class TrafficMeter:
    phases: dict[str, PhaseCounters] = dataclasses.field(default_factory=dict)

    def phase(self, name: str) -> PhaseCounters:
        if name not in self.phases:
            self.phases[name] = PhaseCounters()
        return self.phases[name]

    def merged(self, other: "TrafficMeter") -> "TrafficMeter":
        out = TrafficMeter({k: dataclasses.replace(v) for k, v in self.phases.items()})
        for name, counters in other.phases.items():
            out.phases[name] = out.phase(name).merged(counters)
        return out

    @property
    def total_bytes(self) -> int:
        return sum(p.bytes_total for p in self.phases.values())

    @property
    def total_flops(self) -> int:
        return sum(p.flops for p in self.phases.values())

    def as_rows(self):
        """Yield (phase, counters) in canonical phase order."""
        for name in PHASES:
            if name in self.phases:
                yield name, self.phases[name]
        for name in sorted(self.phases):
            if name not in PHASES:
                yield name, self.phases[name]
