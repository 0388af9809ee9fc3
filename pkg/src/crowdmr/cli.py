"""Operator entry point: run scenarios, replay by seed, render logs, benchmark.

Exit codes are a stable contract: 0 success, 2 bad scenario file or usage,
3 when every node died before the first cycle committed.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from .domain import CATEGORIES
from .reporting import combine_reports, csv_rows, render_run
from .scenario import ScenarioError, load_scenario
from .simnet import RunResult, ScenarioSpec, run_scenario
from .storage import ReportLog

EXIT_OK = 0
EXIT_BAD_SCENARIO = 2
EXIT_ALL_DEAD = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdmr",
        description="Distributed crowd-counting middleware simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("scenario", help="scenario file path")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out", default="runs", help="output directory for artifacts")
        p.add_argument("--format", choices=("text", "csv", "both"), default="text")
        p.add_argument("--wall", action="store_true", help="also print local wall-clock time")

    run_p = sub.add_parser("run", help="execute a scenario and persist its reports")
    add_common(run_p)

    replay_p = sub.add_parser("replay", help="re-execute deterministically, no persistence")
    add_common(replay_p)
    replay_p.set_defaults(replay=True)

    report_p = sub.add_parser("report", help="render previously persisted cycle reports")
    report_p.add_argument("scenario_id")
    report_p.add_argument("--log", default="runs", help="storage log directory")
    report_p.add_argument("--format", choices=("text", "csv", "both"), default="text")

    bench_p = sub.add_parser("bench", help="sweep visitor counts and emit scaling CSV")
    bench_p.add_argument("scenario", help="base scenario file")
    bench_p.add_argument(
        "--visitors",
        default="50,250,500,1000",
        help="comma-separated visitor counts to sweep",
    )
    bench_p.add_argument("--seed", type=int, default=None)
    bench_p.add_argument("--out", default="runs")
    bench_p.add_argument("--wall", action="store_true")
    return parser


def scale_matrix(matrix: dict, target: int) -> dict:
    """Scale matrix cells proportionally to a new total (largest-remainder rounding)."""
    total = sum(matrix.values())
    if total == 0 or target == total:
        return dict(matrix)
    cells = sorted(matrix.items(), key=lambda kv: (kv[0][1], CATEGORIES.index(kv[0][0])))
    scaled = []
    for key, count in cells:
        exact = count * target / total
        scaled.append([key, int(exact), exact - int(exact)])
    short = target - sum(row[1] for row in scaled)
    for row in sorted(scaled, key=lambda row: -row[2])[:short]:
        row[1] += 1
    return {key: count for key, count, _ in scaled if count > 0}


def _emit_run_output(spec: ScenarioSpec, result: RunResult, args, out_dir: Path) -> str:
    text = render_run(spec.scenario_id, spec.seed, result.reports, list(spec.notes))
    total1, total2 = combine_reports(result.reports)
    csv_text = "\n".join(csv_rows(total1, total2)) + "\n"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{spec.scenario_id}.report.txt").write_text(text, encoding="utf-8")
    (out_dir / f"{spec.scenario_id}.csv").write_text(csv_text, encoding="utf-8")
    if args.format == "text":
        return text
    if args.format == "csv":
        return csv_text
    return text + csv_text


def _cmd_run(args, persist: bool) -> int:
    try:
        spec = load_scenario(args.scenario, seed_override=args.seed)
    except ScenarioError as exc:
        print(f"error: bad scenario file: {exc}", file=sys.stderr)
        return EXIT_BAD_SCENARIO
    started = time.monotonic()
    out_dir = Path(args.out)
    sink = ReportLog(out_dir) if persist else None
    result = run_scenario(spec, sink=sink)
    sys.stdout.write(_emit_run_output(spec, result, args, out_dir))
    if args.wall:
        sys.stdout.write(f"# wall: {time.monotonic() - started:.3f}s\n")
    if result.all_nodes_dead and not result.reports:
        print("error: all nodes failed before any cycle committed", file=sys.stderr)
        return EXIT_ALL_DEAD
    return EXIT_OK


def _cmd_report(args) -> int:
    log = ReportLog(args.log)
    try:
        records = log.export(args.scenario_id)
    except KeyError:
        print(f"error: unknown scenario {args.scenario_id!r} in {args.log}", file=sys.stderr)
        return EXIT_BAD_SCENARIO
    if args.format in ("csv", "both"):
        sys.stdout.write("\n".join(log.export_csv(args.scenario_id)) + "\n")
    if args.format in ("text", "both"):
        from .reporting import render_case1, render_case2

        for rec in records:
            head = f"--- cycle {rec.cycle_index} (term {rec.term}, master {rec.master}) ---"
            lines = [head, *render_case1(rec.case1), *render_case2(rec.case2)]
            sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_bench(args) -> int:
    try:
        counts = [int(tok) for tok in args.visitors.split(",") if tok]
    except ValueError:
        print(f"error: bad visitor list {args.visitors!r}", file=sys.stderr)
        return EXIT_BAD_SCENARIO
    if not counts or any(c <= 0 for c in counts):
        print("error: visitor counts must be positive", file=sys.stderr)
        return EXIT_BAD_SCENARIO
    try:
        base = load_scenario(args.scenario, seed_override=args.seed)
    except ScenarioError as exc:
        print(f"error: bad scenario file: {exc}", file=sys.stderr)
        return EXIT_BAD_SCENARIO
    started = time.monotonic()
    rows = ["visitors,cycle_completion_ms,data_messages,total_messages"]
    for count in counts:
        if base.matrix is not None:
            spec = replace(
                base, matrix=scale_matrix(base.matrix, count), visitors=None
            )
        else:
            spec = replace(base, visitors=count)
        spec = replace(spec, scenario_id=f"{base.scenario_id}-v{count}")
        result = run_scenario(spec)
        first_commit = result.reports[0].wall_events if result.reports else {}
        completion = first_commit.get("commit_time", result.end_time)
        rows.append(
            f"{count},{completion},{result.stats['sent_data']},{result.stats['sent']}"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_text = "\n".join(rows) + "\n"
    (out_dir / f"{base.scenario_id}.bench.csv").write_text(csv_text, encoding="utf-8")
    sys.stdout.write(csv_text)
    if args.wall:
        sys.stdout.write(f"# wall: {time.monotonic() - started:.3f}s\n")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args, persist=True)
    if args.command == "replay":
        return _cmd_run(args, persist=False)
    if args.command == "report":
        return _cmd_report(args)
    if args.command == "bench":
        return _cmd_bench(args)
    parser.error(f"unknown command {args.command!r}")
    return EXIT_BAD_SCENARIO


if __name__ == "__main__":
    sys.exit(main())
