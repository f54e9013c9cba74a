"""Command-line front end: verify, cost-sweep, bench.

Exit codes: 0 success, 1 verification failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time

from . import _kernels, kv_major, query_major
from .checks import check_fixture_engines_agree, run_all
from .config import ConfigError, load_config_file, make_config
from .costmodel import CSV_COLUMNS, analytic_csv_row, csv_row, measured_cost
from .meter import TrafficMeter
from .rng import make_dout, make_scores
from .scenario import SELECTION_MODES, Scenario, resolve, tensors
from .selection import (
    SelectionError,
    build_inverse_index,
    load_selection,
    select_topk_blocks,
    validate_selection,
)

MEASURE_CAP_N = 4096  # dense-oracle-free, but keep measured runs desk-scale

DEFAULT_CFG = dict(N=256, d_K=16, d_V=16, h=4, h_K=2, B_K=16, T=4)


def _scenario_from_args(args) -> Scenario:
    if args.config:
        cfg = load_config_file(args.config)
    else:
        cfg = make_config(**DEFAULT_CFG)
    return Scenario(
        cfg,
        seed=args.seed,
        selection_mode=getattr(args, "selection_mode", "random_uniform"),
        repeat=getattr(args, "repeat", 3),
    )


def _write_csv(path, columns, rows):
    def emit(fh):
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            emit(fh)
    else:
        emit(sys.stdout)


def cmd_verify(args) -> int:
    scn = _scenario_from_args(args)
    results = run_all(scn)
    if args.selection:
        sel = load_selection(args.selection)
        validate_selection(sel, scn.cfg)
        results.append(check_fixture_engines_agree(scn, sel))
    rows = []
    failed = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        failed += not res.passed
        print(f"{status}  {res.name:45s} max_error={res.max_error:.3e}  tol={res.tolerance:.0e}")
        rows.append(
            {
                "check_name": res.name,
                "max_error": format(res.max_error, ".12g"),
                "tolerance": format(res.tolerance, ".12g"),
                "status": status,
            }
        )
    print(f"{len(results) - failed}/{len(results)} checks passed")
    if args.csv:
        _write_csv(args.csv, ("check_name", "max_error", "tolerance", "status"), rows)
    return 1 if failed else 0


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from None


def _parse_bk_t(text: str) -> list[tuple[int, int]]:
    pairs = []
    for part in text.split(","):
        if not part.strip():
            continue
        bk, _, t = part.partition(":")
        try:
            pairs.append((int(bk), int(t)))
        except ValueError:
            raise ConfigError(f"--grid-bk-t expects B_K:T pairs, got {part!r}") from None
    return pairs


def _measured_row(cfg, seed):
    sel = select_topk_blocks(make_scores(cfg, seed), cfg)
    Q, K, V = tensors(cfg, seed)
    _, meter_kv = kv_major.selected_forward(Q, K, V, sel, cfg)
    _, meter_qm = query_major.selected_forward(Q, K, V, sel, cfg)
    kv = measured_cost(meter_kv)["total"]
    qm = measured_cost(meter_qm)["total"]
    return csv_row(
        cfg, source="measured",
        fsa_bytes=kv["bytes"], nsa_bytes=qm["bytes"],
        fsa_flops=kv["flops"], nsa_flops=qm["flops"],
        nsa_flops_rederived=qm["flops"],
    )


def cmd_cost_sweep(args) -> int:
    rows = []
    for n in _parse_int_list(args.grid_n, "--grid-n"):
        for d in _parse_int_list(args.grid_d, "--grid-d"):
            for bk, t in _parse_bk_t(args.grid_bk_t):
                for g in _parse_int_list(args.grid_g, "--grid-g"):
                    try:
                        cfg = make_config(N=n, d_K=d, d_V=d, h=g, h_K=1, B_K=bk, T=t)
                    except ConfigError as exc:
                        print(
                            f"warning: skipping grid point (g={g}, B_K={bk}, T={t}, N={n}, d={d}): {exc}",
                            file=sys.stderr,
                        )
                        continue
                    rows.append(analytic_csv_row(cfg))
                    if args.measure:
                        if n > MEASURE_CAP_N:
                            print(
                                f"warning: measured run skipped at N={n} > {MEASURE_CAP_N}",
                                file=sys.stderr,
                            )
                        else:
                            rows.append(_measured_row(cfg, args.seed))
    _write_csv(args.csv, CSV_COLUMNS, rows)
    return 0


def _time_phase(fn, repeat):
    times = []
    result = None
    for _ in range(repeat):
        start = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - start)
    return result, statistics.median(times), min(times)


BENCH_COLUMNS = (
    "engine", "phase", "backend", "repeat", "median_s", "min_s",
    "bytes_loaded", "bytes_stored", "flops", "task_count", "inner_iterations",
)


def _bench_backend(scn: Scenario, backend: str, rows: list) -> None:
    cfg, sel = resolve(scn)
    Q, K, V = tensors(cfg, scn.seed)
    dOut = make_dout(cfg, scn.seed)
    inv = build_inverse_index(sel, cfg)

    def record(engine, phase, meter_phase, median_s, min_s):
        rows.append(
            {
                "engine": engine, "phase": phase, "backend": backend,
                "repeat": scn.repeat,
                "median_s": format(median_s, ".6e"), "min_s": format(min_s, ".6e"),
                "bytes_loaded": meter_phase.bytes_loaded,
                "bytes_stored": meter_phase.bytes_stored,
                "flops": meter_phase.flops,
                "task_count": meter_phase.task_count,
                "inner_iterations": meter_phase.inner_iterations,
            }
        )

    def run_stats():
        m = TrafficMeter()
        return kv_major.compute_softmax_stats(Q, K, sel, cfg, meter=m), m

    (stats, m_stats), med, best = _time_phase(run_stats, scn.repeat)
    record("kv_major", "stats", m_stats.phase("stats"), med, best)

    def run_block():
        m = TrafficMeter()
        return kv_major.block_pass_forward(Q, K, V, inv, stats, cfg, meter=m), m

    (buf, m_block), med, best = _time_phase(run_block, scn.repeat)
    record("kv_major", "block_pass", m_block.phase("block_pass"), med, best)

    def run_reduce():
        m = TrafficMeter()
        return kv_major.reduce_forward(buf, inv, stats, cfg, meter=m), m

    (_, m_reduce), med, best = _time_phase(run_reduce, scn.repeat)
    record("kv_major", "reduce", m_reduce.phase("reduce"), med, best)

    (_, qm_meter), med, best = _time_phase(
        lambda: query_major.selected_forward(Q, K, V, sel, cfg), scn.repeat
    )
    record("query_major", "forward", qm_meter.phase("query_major"), med, best)

    res_kv, med, best = _time_phase(
        lambda: kv_major.selected_backward(Q, K, V, sel, dOut, cfg), scn.repeat
    )
    for phase_name, counters in res_kv[3].as_rows():
        record("kv_major", f"backward_{phase_name}", counters, med, best)

    res_qm, med, best = _time_phase(
        lambda: query_major.selected_backward(Q, K, V, sel, dOut, cfg), scn.repeat
    )
    record("query_major", "backward", res_qm[3].phase("query_major"), med, best)


def cmd_bench(args) -> int:
    scn = _scenario_from_args(args)
    if args.backend == "both":
        backends = _kernels.available_backends()
    elif args.backend == "auto":
        backends = (_kernels.get_backend(),)
    else:
        if args.backend not in _kernels.available_backends():
            raise ConfigError(f"backend {args.backend!r} is not available")
        backends = (args.backend,)
    rows: list[dict] = []
    previous = _kernels.get_backend()
    try:
        for backend in backends:
            _kernels.set_backend(backend)
            _bench_backend(scn, backend, rows)
    finally:
        _kernels.set_backend(previous)
    _write_csv(args.csv, BENCH_COLUMNS, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockattn",
        description="Block-selected sparse attention simulator and cost model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run oracle/engine equivalence and invariant checks")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--selection-mode", choices=SELECTION_MODES, default="random_uniform")
    p.add_argument("--selection", help="binary selection fixture to validate and run")
    p.add_argument("--csv", help="write the check report as CSV")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("cost-sweep", help="analytic (and optionally measured) cost grid")
    p.add_argument("--grid-g", default="1,2,4,8")
    p.add_argument("--grid-bk-t", default="64:16", help="comma-separated B_K:T pairs")
    p.add_argument("--grid-n", default="65536")
    p.add_argument("--grid-d", default="128")
    p.add_argument("--measure", action="store_true", help="add measured rows (N <= 4096)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="output CSV path (defaults to stdout)")
    p.set_defaults(fn=cmd_cost_sweep)

    p = sub.add_parser("bench", help="wall-clock micro-benchmarks of the CPU engines")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--selection-mode", choices=SELECTION_MODES, default="random_uniform")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--backend", choices=("auto", "pure", "compiled", "both"), default="auto")
    p.add_argument("--csv", help="output CSV path (defaults to stdout)")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SelectionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
