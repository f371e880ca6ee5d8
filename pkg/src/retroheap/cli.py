"""Command-line interface.

    retroheap run --workload treechurn --domains 2 --minor stw \
        --arena-words 4096 --seed 7 --out stats.csv
    retroheap explore --domains 3 --revivals 2

Set RETROHEAP_DEBUG_ORACLE=1 to run the full-trace reachability oracle at
every stop-the-world point (slow; meant for small heaps).
"""

from __future__ import annotations

import argparse
import sys

from . import explore as explore_mod
from .report import emit_stats
from .workloads import WORKLOADS, WorkloadError, WorkloadSpec, run_workload


def _build_parser():
    p = argparse.ArgumentParser(prog="retroheap")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a mutator workload and emit GC stats")
    run.add_argument("--workload", required=True, choices=WORKLOADS)
    run.add_argument("--domains", type=int, default=1)
    run.add_argument("--minor", choices=("stw", "conc"), default="stw")
    run.add_argument("--arena-words", type=int, default=4096)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--iterations", type=int, default=50)
    run.add_argument("--max-slice", type=int, default=None,
                     help="cap the major slice budget (words)")
    run.add_argument("--min-slice", type=int, default=4096)
    run.add_argument("--pacing-factor", type=float, default=1.5)
    run.add_argument("--retained", type=int, default=0,
                     help="retained-graph objects (ephecache)")
    run.add_argument("--mode", choices=("threads", "explore"), default="threads",
                     help="explore = deterministic cooperative scheduling")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--out", default="-")
    run.add_argument("--hist", default=None,
                     help="write a gnuplot-compatible pause histogram here")

    ex = sub.add_parser("explore",
                        help="exhaustively check the phase-transition protocol")
    ex.add_argument("--domains", type=int, default=2)
    ex.add_argument("--revivals", type=int, default=1)
    ex.add_argument("--max-schedules", type=int, default=1_000_000)
    ex.add_argument("--mutation", default=explore_mod.MUTATION_NONE,
                    choices=(explore_mod.MUTATION_NONE,) + explore_mod.MUTATIONS,
                    help="inject a known bug; the checker must find it")
    return p


def _cmd_run(args) -> int:
    spec = WorkloadSpec(
        name=args.workload,
        num_domains=args.domains,
        iterations=args.iterations,
        arena_words=args.arena_words,
        minor_variant=args.minor,
        seed=args.seed,
        mode=args.mode,
        pacing_factor=args.pacing_factor,
        min_slice_words=args.min_slice,
        max_slice_words=args.max_slice,
        retained_objects=args.retained,
    )
    try:
        report = run_workload(spec)
    except (WorkloadError, ValueError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    if args.out == "-":
        from .report import CSV_HEADER
        if args.format == "csv":
            print(CSV_HEADER)
            print(report.csv_row())
        else:
            print(report.to_json())
        if args.hist:
            emit_stats(report, args.format, "/dev/null", hist_path=args.hist)
    else:
        emit_stats(report, args.format, args.out, hist_path=args.hist)
    return 0


def _cmd_explore(args) -> int:
    if args.domains > 3:
        print("error: explore mode supports at most 3 domains", file=sys.stderr)
        return 2
    verdict = explore_mod.explore_interleavings(
        num_doms=args.domains,
        revivals=args.revivals,
        mutation=args.mutation,
        max_schedules=args.max_schedules,
    )
    print(verdict)
    if args.mutation != explore_mod.MUTATION_NONE:
        # An injected bug must be caught: "ok" is the failure here.
        return 0 if not verdict.ok else 1
    return 0 if verdict.ok else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_explore(args)


if __name__ == "__main__":
    sys.exit(main())
