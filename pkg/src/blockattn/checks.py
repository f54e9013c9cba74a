"""Named correctness checks run by the ``verify`` CLI command.

Each check returns a :class:`CheckResult` with the observed maximum error and
its tolerance. ``run_all`` executes every check against one scenario. The
README's traceability table maps the package invariants to the check names
here.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import kv_major, query_major, rng
from .branches import compress_kv, compressed_attention_forward, gated_combine, sliding_attention_forward
from .config import make_config, validate_config
from .costmodel import kv_major_analytic_cost
from .oracle import dense_backward, full_attention_forward, mask_from_selection, masked_attention_forward
from .scenario import Scenario, resolve, tensors
from .selection import build_inverse_index, selection_from_inverse


@dataclasses.dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _maxabs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.asarray(a).size else 0.0


def check_config_idempotent(scn: Scenario) -> CheckResult:
    cfg = scn.cfg
    again = validate_config(cfg)
    err = 0.0 if again == cfg else 1.0
    return CheckResult("config.validate_idempotent", err, 0.0)


def check_config_identities(scn: Scenario) -> CheckResult:
    cfg = scn.cfg
    err = float(abs(cfg.g * cfg.h_K - cfg.h) + abs(cfg.b * cfg.B_K - cfg.N))
    return CheckResult("config.derived_identities", err, 0.0)


def check_oracle_row_stochastic(scn: Scenario) -> CheckResult:
    cfg, sel = resolve(scn)
    Q, K, _ = tensors(cfg, scn.seed)
    ones = np.ones((cfg.N, cfg.d_V, cfg.h_K))
    out = masked_attention_forward(Q, K, ones, mask_from_selection(sel, cfg), cfg)
    return CheckResult("oracle.row_stochastic", _maxabs(out.out, 1.0), 1e-12)


def check_oracle_causality(scn: Scenario) -> CheckResult:
    cfg, _ = resolve(scn)
    Q, K, V = tensors(cfg, scn.seed)
    base = full_attention_forward(Q, K, V, cfg)
    cut = cfg.N // 2
    K2, V2 = K.copy(), V.copy()
    K2[cut:] += 3.0
    V2[cut:] -= 5.0
    bumped = full_attention_forward(Q, K2, V2, cfg)
    return CheckResult(
        "oracle.causality_perturbation", _maxabs(base.out[:cut], bumped.out[:cut]), 0.0
    )


def check_oracle_shift_invariance(scn: Scenario) -> CheckResult:
    # add a constant to every logit of one query row via an appended feature
    cfg, sel = resolve(scn)
    Q, K, V = tensors(cfg, scn.seed)
    mask = mask_from_selection(sel, cfg)
    base = masked_attention_forward(Q, K, V, mask, cfg)
    cfg2 = make_config(
        N=cfg.N, d_K=cfg.d_K + 1, d_V=cfg.d_V, h=cfg.h, h_K=cfg.h_K,
        B_K=cfg.B_K, T=cfg.T, B_Q=cfg.B_Q, W=cfg.W,
    )
    rho = np.sqrt((cfg.d_K + 1) / cfg.d_K)
    t_row, c = cfg.N // 2, 7.5
    Q2 = np.concatenate([Q * rho, np.zeros((cfg.N, 1, cfg.h))], axis=1)
    Q2[t_row, -1, :] = c * np.sqrt(cfg.d_K + 1)
    K2 = np.concatenate([K, np.ones((cfg.N, 1, cfg.h_K))], axis=1)
    shifted = masked_attention_forward(Q2, K2, V, mask, cfg2)
    return CheckResult("oracle.shift_invariance", _maxabs(base.out, shifted.out), 1e-12)


def check_oracle_backward_fd(scn: Scenario) -> CheckResult:
    # small dedicated instance; central differences over every entry
    cfg = make_config(N=8, d_K=4, d_V=4, h=2, h_K=1, B_K=4, T=2, B_Q=4, W=8)
    Q, K, V = tensors(cfg, scn.seed + 1)
    sel = resolve(Scenario(cfg, seed=scn.seed + 1))[1]
    mask = mask_from_selection(sel, cfg)
    dOut = rng.make_dout(cfg, scn.seed + 1)
    dQ, dK, dV = dense_backward(Q, K, V, mask, dOut, cfg)
    step = 1e-5

    def loss(q, k, v):
        return float(np.sum(masked_attention_forward(q, k, v, mask, cfg).out * dOut))

    worst = 0.0
    for arr, grad in ((Q, dQ), (K, dK), (V, dV)):
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss(Q, K, V)
            flat[idx] = orig - step
            down = loss(Q, K, V)
            flat[idx] = orig
            fd_flat[idx] = (up - down) / (2 * step)
        rel = np.abs(fd - grad) / np.maximum.reduce([np.abs(grad), np.abs(fd), np.full_like(grad, 1e-4)])
        worst = max(worst, float(rel.max()))
    return CheckResult("oracle.backward_matches_fd", worst, 1e-5)


def check_selection_round_trip(scn: Scenario) -> CheckResult:
    cfg, sel = resolve(scn)
    inv = build_inverse_index(sel, cfg)
    rebuilt = selection_from_inverse(inv, cfg)
    err = 0.0 if np.array_equal(rebuilt.idx, sel.idx) else 1.0
    return CheckResult("selection.round_trip", err, 0.0)


def check_selection_inverse_consistency(scn: Scenario) -> CheckResult:
    cfg, sel = resolve(scn)
    inv = build_inverse_index(sel, cfg)
    err = 0.0
    if int(inv.n_valid.sum()) != sel.nnz():
        err = 1.0
    for kh in range(cfg.h_K):
        for i in range(cfg.b):
            q = inv.queries[kh][i]
            if q.size and (np.diff(q) <= 0).any():
                err = 1.0
            slots = inv.slots(kh, i)
            if sorted(slots.values()) != list(range(len(q))):
                err = 1.0
    return CheckResult("selection.inverse_consistency", err, 0.0)


def check_selection_order_independence(scn: Scenario) -> CheckResult:
    cfg, sel = resolve(scn)
    inv1 = build_inverse_index(sel, cfg)
    fresh = type(sel)(sel.idx.copy())
    inv2 = build_inverse_index(fresh, cfg)
    err = 0.0 if np.array_equal(inv1.n_valid, inv2.n_valid) and all(
        np.array_equal(a, b)
        for qa, qb in zip(inv1.queries, inv2.queries)
        for a, b in zip(qa, qb)
    ) else 1.0
    return CheckResult("selection.order_independence", err, 0.0)


def _engine_inputs(scn: Scenario):
    cfg, sel = resolve(scn)
    Q, K, V = tensors(cfg, scn.seed)
    ref = masked_attention_forward(Q, K, V, mask_from_selection(sel, cfg), cfg)
    return cfg, sel, Q, K, V, ref


def check_kv_major_forward(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, ref = _engine_inputs(scn)
    got, _ = kv_major.selected_forward(Q, K, V, sel, cfg)
    return CheckResult("kv_major.forward_matches_oracle", _maxabs(got.out, ref.out), 1e-10)


def check_query_major_forward(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, ref = _engine_inputs(scn)
    got, _ = query_major.selected_forward(Q, K, V, sel, cfg)
    return CheckResult("query_major.forward_matches_oracle", _maxabs(got.out, ref.out), 1e-10)


def check_loop_order_agreement(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, _ = _engine_inputs(scn)
    a, _ = kv_major.selected_forward(Q, K, V, sel, cfg)
    b, _ = query_major.selected_forward(Q, K, V, sel, cfg)
    return CheckResult("engines.loop_order_agreement", _maxabs(a.out, b.out), 1e-10)


def check_full_mode_equals_full_attention(scn: Scenario) -> CheckResult:
    full_scn = Scenario(scn.cfg, seed=scn.seed, selection_mode="full")
    cfg, sel = resolve(full_scn)
    Q, K, V = tensors(cfg, scn.seed)
    ref = full_attention_forward(Q, K, V, cfg)
    got, _ = kv_major.selected_forward(Q, K, V, sel, cfg)
    return CheckResult("engines.full_selection_equals_full_attention", _maxabs(got.out, ref.out), 1e-10)


def check_backward_matches_dense(scn: Scenario) -> CheckResult:
    # fixed small dims (finite-difference-friendly), scenario head structure
    small = make_config(
        N=32, d_K=8, d_V=8, h=scn.cfg.h, h_K=scn.cfg.h_K,
        B_K=8, T=min(scn.cfg.T, 4), B_Q=8,
    )
    cfg, sel = resolve(Scenario(small, seed=scn.seed, selection_mode=scn.selection_mode))
    Q, K, V = tensors(cfg, scn.seed)
    dOut = rng.make_dout(cfg, scn.seed)
    want = dense_backward(Q, K, V, mask_from_selection(sel, cfg), dOut, cfg)
    err = 0.0
    for engine in (kv_major, query_major):
        got = engine.selected_backward(Q, K, V, sel, dOut, cfg)[:3]
        err = max(err, max(_maxabs(a, b) for a, b in zip(got, want)))
    return CheckResult("engines.backward_matches_dense", err, 1e-9)


def check_shared_max_invariance(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, _ = _engine_inputs(scn)
    exact, _ = kv_major.selected_forward(Q, K, V, sel, cfg)
    shared, _ = kv_major.selected_forward(Q, K, V, sel, cfg, shared_max=True)
    return CheckResult("kv_major.shared_max_invariance", _maxabs(exact.out, shared.out), 1e-10)


def check_schedule_determinism(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, _ = _engine_inputs(scn)
    base, _ = kv_major.selected_forward(Q, K, V, sel, cfg)
    order = np.arange(cfg.h * cfg.b)[::-1]
    permuted, _ = kv_major.selected_forward(Q, K, V, sel, cfg, task_order=order)
    err = 0.0 if np.array_equal(base.out, permuted.out) else 1.0
    return CheckResult("kv_major.schedule_determinism", err, 0.0)


def check_early_return_accounting(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, _ = _engine_inputs(scn)
    _, meter = kv_major.selected_forward(Q, K, V, sel, cfg)
    inv = build_inverse_index(sel, cfg)
    expected = 0
    for j in range(cfg.h):
        for i in range(cfg.b):
            n = int(inv.n_valid[j // cfg.g, i])
            if n:
                expected += (cfg.B_K * (cfg.d_K + cfg.d_V) + n * cfg.d_K + n) * cfg.bytes_per_elem
    return CheckResult(
        "kv_major.early_return_accounting",
        float(abs(meter.phase("block_pass").bytes_loaded - expected)), 0.0,
    )


def check_buffer_bound(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, _ = _engine_inputs(scn)
    inv = build_inverse_index(sel, cfg)
    stats = kv_major.compute_softmax_stats(Q, K, sel, cfg)
    buf = kv_major.block_pass_forward(Q, K, V, inv, stats, cfg)
    bound = cfg.d_V * cfg.N * cfg.T
    over = max(0, buf.peak_elements - bound)
    return CheckResult("kv_major.buffer_bound", float(over), 0.0, note=f"peak={buf.peak_elements}")


def check_single_writer(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, _ = _engine_inputs(scn)
    inv = build_inverse_index(sel, cfg)
    stats = kv_major.compute_softmax_stats(Q, K, sel, cfg)
    buf = kv_major.block_pass_forward(Q, K, V, inv, stats, cfg)
    err = 0.0
    for j in range(cfg.h):
        for i in range(cfg.b):
            n = int(inv.n_valid[j // cfg.g, i])
            region = buf.rows[j][i]
            if (region is None) != (n == 0) or (region is not None and region.shape[0] != n):
                err = 1.0
    return CheckResult("kv_major.single_writer_audit", err, 0.0)


def check_stats_match_dense(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, ref = _engine_inputs(scn)
    stats = kv_major.compute_softmax_stats(Q, K, sel, cfg)
    lse = stats.m + np.log(stats.l)
    return CheckResult("kv_major.stats_match_dense", _maxabs(lse, ref.lse), 1e-12)


def check_padding_bytes(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, _ = _engine_inputs(scn)
    _, meter = query_major.selected_forward(Q, K, V, sel, cfg)
    pad = max(cfg.g, cfg.min_tile)
    steps = int(sel.row_lengths().sum())
    expected = (cfg.h_K * cfg.N * pad * cfg.d_K + steps * cfg.B_K * (cfg.d_K + cfg.d_V)) * cfg.bytes_per_elem
    return CheckResult(
        "query_major.padding_bytes",
        float(abs(meter.phase("query_major").bytes_loaded - expected)), 0.0,
    )


def check_causal_skip_accounting(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, _ = _engine_inputs(scn)
    _, meter = query_major.selected_forward(Q, K, V, sel, cfg)
    pad = max(cfg.g, cfg.min_tile)
    kv_bytes = meter.phase("query_major").bytes_loaded - cfg.h_K * cfg.N * pad * cfg.d_K * cfg.bytes_per_elem
    expected = int(sel.row_lengths().sum()) * cfg.B_K * (cfg.d_K + cfg.d_V) * cfg.bytes_per_elem
    return CheckResult("query_major.causal_skip_accounting", float(abs(kv_bytes - expected)), 0.0)


def check_sliding_full_window(scn: Scenario) -> CheckResult:
    cfg = validate_config(dataclasses.replace(scn.cfg, W=scn.cfg.N))
    Q, K, V = tensors(cfg, scn.seed)
    ref = full_attention_forward(Q, K, V, cfg)
    got = sliding_attention_forward(Q, K, V, cfg)
    return CheckResult("branches.sliding_full_window", _maxabs(got.out, ref.out), 1e-12)


def check_compressed_identity(scn: Scenario) -> CheckResult:
    cfg = make_config(
        N=min(scn.cfg.N, 32), d_K=scn.cfg.d_K, d_V=scn.cfg.d_V,
        h=scn.cfg.h, h_K=scn.cfg.h_K, B_K=1, T=1,
    )
    Q, K, V = tensors(cfg, scn.seed)
    ref = full_attention_forward(Q, K, V, cfg)
    got = compressed_attention_forward(Q, compress_kv(K, V, cfg), cfg)
    return CheckResult("branches.compressed_identity_bk1", _maxabs(got.out, ref.out), 1e-12)


def check_gate_linearity(scn: Scenario) -> CheckResult:
    cfg, sel = resolve(scn)
    Q, K, V = tensors(cfg, scn.seed)
    cmp = compress_kv(K, V, cfg)
    outs = (
        compressed_attention_forward(Q, cmp, cfg),
        masked_attention_forward(Q, K, V, mask_from_selection(sel, cfg), cfg),
        sliding_attention_forward(Q, K, V, cfg),
    )
    tau1 = rng.make_gates(cfg, scn.seed)
    tau2 = rng.make_gates(cfg, scn.seed + 1)
    lam = 0.375
    mix = lam * tau1 + (1 - lam) * tau2
    lhs = gated_combine(outs, mix, cfg).out
    rhs = lam * gated_combine(outs, tau1, cfg).out + (1 - lam) * gated_combine(outs, tau2, cfg).out
    one_hot = np.zeros((cfg.N, 3))
    one_hot[:, 1] = 1.0
    sel_only = gated_combine(outs, one_hot, cfg).out
    err = max(_maxabs(lhs, rhs), _maxabs(sel_only, outs[1].out))
    return CheckResult("branches.gate_linearity", err, 1e-12)


def check_meter_iteration_identity(scn: Scenario) -> CheckResult:
    cfg, sel, Q, K, V, _ = _engine_inputs(scn)
    _, meter = kv_major.selected_forward(Q, K, V, sel, cfg)
    inv = build_inverse_index(sel, cfg)
    want = sum(
        -(-int(inv.n_valid[j // cfg.g, i]) // cfg.B_Q)
        for j in range(cfg.h)
        for i in range(cfg.b)
        if inv.n_valid[j // cfg.g, i]
    )
    got = meter.phase("block_pass").inner_iterations
    return CheckResult("meters.block_pass_iteration_identity", float(abs(got - want)), 0.0)


def check_meter_value_independence(scn: Scenario) -> CheckResult:
    cfg, sel = resolve(scn)
    Q1, K1, V1 = tensors(cfg, scn.seed)
    Q2, K2, V2 = tensors(cfg, scn.seed + 99)
    _, m1 = kv_major.selected_forward(Q1, K1, V1, sel, cfg)
    _, m2 = kv_major.selected_forward(Q2, K2, V2, sel, cfg)
    err = 0.0 if m1 == m2 else 1.0
    return CheckResult("meters.value_independence", err, 0.0)


def check_measured_component_order(scn: Scenario) -> CheckResult:
    # sanity: measured phase bytes are positive and the analytic component
    # split covers the same three phases
    cfg, sel, Q, K, V, _ = _engine_inputs(scn)
    _, meter = kv_major.selected_forward(Q, K, V, sel, cfg)
    analytic = kv_major_analytic_cost(cfg)
    err = 0.0
    for phase, comp in (("stats", "stats"), ("block_pass", "selected"), ("reduce", "reduce")):
        if meter.phase(phase).bytes_total <= 0 or analytic[comp]["bytes"] <= 0:
            err = 1.0
    return CheckResult("costmodel.component_coverage", err, 0.0)


ALL_CHECKS = (
    check_config_idempotent,
    check_config_identities,
    check_oracle_row_stochastic,
    check_oracle_causality,
    check_oracle_shift_invariance,
    check_oracle_backward_fd,
    check_selection_round_trip,
    check_selection_inverse_consistency,
    check_selection_order_independence,
    check_kv_major_forward,
    check_query_major_forward,
    check_loop_order_agreement,
    check_full_mode_equals_full_attention,
    check_backward_matches_dense,
    check_shared_max_invariance,
    check_schedule_determinism,
    check_early_return_accounting,
    check_buffer_bound,
    check_single_writer,
    check_stats_match_dense,
    check_padding_bytes,
    check_causal_skip_accounting,
    check_sliding_full_window,
    check_compressed_identity,
    check_gate_linearity,
    check_meter_iteration_identity,
    check_meter_value_independence,
    check_measured_component_order,
)


def run_all(scn: Scenario) -> list[CheckResult]:
    return [fn(scn) for fn in ALL_CHECKS]


def check_fixture_engines_agree(scn: Scenario, sel) -> CheckResult:
    """Extra check for a user-supplied selection fixture: engines vs oracle."""
    cfg = scn.cfg
    Q, K, V = tensors(cfg, scn.seed)
    ref = masked_attention_forward(Q, K, V, mask_from_selection(sel, cfg), cfg)
    a, _ = kv_major.selected_forward(Q, K, V, sel, cfg)
    b, _ = query_major.selected_forward(Q, K, V, sel, cfg)
    err = max(_maxabs(a.out, ref.out), _maxabs(b.out, ref.out))
    return CheckResult("fixture.engines_match_oracle", err, 1e-10)
