"""Cycle reports and their terminal/CSV renderings.

The terminal format mirrors the middleware's console output: a visitor-view
sum line and composite map, then a room-view sum line and per-room rows.
The CSV schema is `case,key,count`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .domain import CATEGORIES, CompositeKey, NodeId
from .mapreduce import Case1Result, Case2Result


@dataclass(frozen=True)
class CycleReport:
    """One committed task cycle: both aggregate views plus commit metadata."""

    cycle_index: int
    term: int
    master: NodeId
    case1: Case1Result
    case2: Case2Result
    events_processed: int
    wall_events: dict[str, int] = field(default_factory=dict)


def render_case1(case1: Case1Result) -> list[str]:
    totals = ", ".join(f"{cat.value} : {case1.per_category_totals[cat]}" for cat in CATEGORIES)
    keys = sorted(case1.composite_breakdown, key=CompositeKey.sort_key)
    entries = ", ".join(f"{k.text()}={case1.composite_breakdown[k]}" for k in keys)
    return [f">>Sum: {{ {totals} }}", f"{{ {entries} }}"]


def render_case2(case2: Case2Result) -> list[str]:
    rooms = sorted(case2.per_room_totals)
    totals = ", ".join(f"Room{r} : {case2.per_room_totals[r]}" for r in rooms)
    lines = [f">>Sum: {{ {totals} }}"]
    for r in rooms:
        cats = case2.per_room_breakdown[r]
        row = ", ".join(f"{cat.value}: {cats[cat]}" for cat in CATEGORIES)
        lines.append(f"{r}: {{ {row} }}")
    return lines


def render_cycle(report: CycleReport) -> list[str]:
    header = (
        f"--- cycle {report.cycle_index} "
        f"(term {report.term}, master {report.master}, events {report.events_processed}) ---"
    )
    return [header, *render_case1(report.case1), *render_case2(report.case2)]


def csv_rows(case1: Case1Result, case2: Case2Result) -> list[str]:
    """Machine-readable rows for one pair of aggregates: case,key,count."""
    rows = ["case,key,count"]
    for cat in CATEGORIES:
        rows.append(f"1,{cat.value},{case1.per_category_totals[cat]}")
    for key in sorted(case1.composite_breakdown, key=CompositeKey.sort_key):
        rows.append(f"1,{key.text()},{case1.composite_breakdown[key]}")
    for room in sorted(case2.per_room_totals):
        rows.append(f"2,Room{room},{case2.per_room_totals[room]}")
        cats = case2.per_room_breakdown[room]
        for cat in CATEGORIES:
            rows.append(f"2,Room{room}.{cat.value},{cats[cat]}")
    return rows


def combine_reports(reports: list[CycleReport]) -> tuple[Case1Result, Case2Result]:
    """Sum aggregates across committed cycles (the run's final totals)."""
    composite: dict[CompositeKey, int] = {}
    rooms: set[int] = set()
    for rep in reports:
        for key, count in rep.case1.composite_breakdown.items():
            composite[key] = composite.get(key, 0) + count
        rooms.update(rep.case2.per_room_totals)

    cat_totals = {cat: 0 for cat in CATEGORIES}
    for key, count in composite.items():
        cat_totals[key.category] += count
    room_breakdown = {room: {cat: 0 for cat in CATEGORIES} for room in sorted(rooms)}
    for key, count in composite.items():
        room_breakdown.setdefault(key.room, {cat: 0 for cat in CATEGORIES})
        room_breakdown[key.room][key.category] += count
    room_totals = {room: sum(cats.values()) for room, cats in sorted(room_breakdown.items())}
    ordered = {k: composite[k] for k in sorted(composite, key=CompositeKey.sort_key)}
    return (
        Case1Result(cat_totals, ordered),
        Case2Result(room_totals, dict(sorted(room_breakdown.items()))),
    )


def render_run(
    scenario_id: str,
    seed: int,
    reports: list[CycleReport],
    notes: list[str] | None = None,
) -> str:
    """Full terminal report for a finished run; byte-stable for a fixed seed."""
    lines = [f"scenario: {scenario_id}", f"seed: {seed}", f"cycles: {len(reports)}"]
    for note in notes or []:
        lines.append(f"note: {note}")
    for rep in reports:
        lines.extend(render_cycle(rep))
    if reports:
        total1, total2 = combine_reports(reports)
        lines.append("--- run totals ---")
        lines.extend(render_case1(total1))
        lines.extend(render_case2(total2))
    return "\n".join(lines) + "\n"
