"""Append-only persistence of committed cycle reports: the data layer.

One JSON line per record, one file per scenario.  Appends are line-atomic
(a record is wholly present or wholly absent; a torn final line is ignored
on read-back) and idempotent on (scenario_id, cycle_index, term).  The
ingest timestamp is the virtual commit time so log bytes stay reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from .domain import CATEGORIES, CompositeKey, NodeId, TagCategory, parse_composite_key
from .mapreduce import Case1Result, Case2Result
from .reporting import CycleReport


class SinkUnavailable(OSError):
    """The log directory or file cannot be written; callers retry next cycle."""


class UnknownScenario(KeyError):
    pass


@dataclass(frozen=True)
class MeasurementRecord:
    scenario_id: str
    cycle_index: int
    master: NodeId
    term: int
    case1: Case1Result
    case2: Case2Result
    ingest_time: int

    def key(self) -> tuple[str, int, int]:
        return (self.scenario_id, self.cycle_index, self.term)


def record_from_report(scenario_id: str, report: CycleReport, ingest_time: int) -> MeasurementRecord:
    return MeasurementRecord(
        scenario_id=scenario_id,
        cycle_index=report.cycle_index,
        master=report.master,
        term=report.term,
        case1=report.case1,
        case2=report.case2,
        ingest_time=ingest_time,
    )


def _case1_to_json(case1: Case1Result) -> dict:
    return {
        "totals": {cat.value: case1.per_category_totals[cat] for cat in CATEGORIES},
        "composite": {k.text(): v for k, v in case1.composite_breakdown.items()},
    }


def _case2_to_json(case2: Case2Result) -> dict:
    return {
        "room_totals": {str(r): v for r, v in case2.per_room_totals.items()},
        "breakdown": {
            str(r): {cat.value: cats[cat] for cat in CATEGORIES}
            for r, cats in case2.per_room_breakdown.items()
        },
    }


def _case1_from_json(obj: dict) -> Case1Result:
    totals = {cat: int(obj["totals"][cat.value]) for cat in CATEGORIES}
    composite = {parse_composite_key(k): int(v) for k, v in obj["composite"].items()}
    return Case1Result(totals, composite)


def _case2_from_json(obj: dict) -> Case2Result:
    totals = {int(r): int(v) for r, v in obj["room_totals"].items()}
    breakdown = {
        int(r): {cat: int(cats[cat.value]) for cat in CATEGORIES}
        for r, cats in obj["breakdown"].items()
    }
    return Case2Result(totals, breakdown)


def _record_line(record: MeasurementRecord) -> str:
    doc = {
        "v": 1,
        "scenario": record.scenario_id,
        "cycle": record.cycle_index,
        "master": record.master,
        "term": record.term,
        "case1": _case1_to_json(record.case1),
        "case2": _case2_to_json(record.case2),
        "ingest": record.ingest_time,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _record_from_line(line: str) -> MeasurementRecord:
    doc = json.loads(line)
    return MeasurementRecord(
        scenario_id=doc["scenario"],
        cycle_index=int(doc["cycle"]),
        master=int(doc["master"]),
        term=int(doc["term"]),
        case1=_case1_from_json(doc["case1"]),
        case2=_case2_from_json(doc["case2"]),
        ingest_time=int(doc["ingest"]),
    )


class ReportLog:
    """File-backed append-only sink standing in for the remote database."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise SinkUnavailable(f"cannot create log directory {directory}: {exc}") from exc
        self._known: dict[str, set[tuple[str, int, int]]] = {}

    def _path(self, scenario_id: str) -> Path:
        return self.directory / f"{scenario_id}.jsonl"

    def _load_keys(self, scenario_id: str) -> set[tuple[str, int, int]]:
        if scenario_id not in self._known:
            keys = {rec.key() for rec in self._read_all(scenario_id)}
            self._known[scenario_id] = keys
        return self._known[scenario_id]

    def _read_all(self, scenario_id: str) -> list[MeasurementRecord]:
        path = self._path(scenario_id)
        if not path.exists():
            return []
        records = []
        raw = path.read_bytes().decode("utf-8")
        for line in raw.split("\n")[:-1]:  # a torn tail without \n is ignored
            if line:
                records.append(_record_from_line(line))
        return records

    def append_report(self, record: MeasurementRecord) -> None:
        """Durably append; a duplicate (scenario, cycle, term) triple is a no-op."""
        keys = self._load_keys(record.scenario_id)
        if record.key() in keys:
            return
        line = _record_line(record) + "\n"
        try:
            with open(self._path(record.scenario_id), "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise SinkUnavailable(f"append failed: {exc}") from exc
        keys.add(record.key())

    def export(self, scenario_id: str) -> list[MeasurementRecord]:
        """All records for a scenario ordered by (cycle_index, term)."""
        path = self._path(scenario_id)
        if not path.exists():
            raise UnknownScenario(scenario_id)
        return sorted(self._read_all(scenario_id), key=lambda r: (r.cycle_index, r.term))

    def export_csv(self, scenario_id: str) -> list[str]:
        """CSV mirroring the report schema, prefixed with commit coordinates."""
        rows = ["scenario,cycle,term,case,key,count"]
        for rec in self.export(scenario_id):
            prefix = f"{rec.scenario_id},{rec.cycle_index},{rec.term}"
            for cat in CATEGORIES:
                rows.append(f"{prefix},1,{cat.value},{rec.case1.per_category_totals[cat]}")
            for key in sorted(rec.case1.composite_breakdown, key=CompositeKey.sort_key):
                rows.append(f"{prefix},1,{key.text()},{rec.case1.composite_breakdown[key]}")
            for room in sorted(rec.case2.per_room_totals):
                rows.append(f"{prefix},2,Room{room},{rec.case2.per_room_totals[room]}")
        return rows
