"""The counting pipeline: map room batches to keyed counts, partition, reduce, aggregate.

Every operation here is a pure function over immutable inputs.  The
distributed runtime (node.py) calls these same functions; the sequential
oracle at the bottom is an independent single-pass tally used to verify
every distributed path.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .domain import CATEGORIES, CompositeKey, RoomId, TagCategory, VisitorEvent


class ForeignRoomEvent(ValueError):
    """A mapper batch contained an event belonging to another room."""


class ZeroReducers(ValueError):
    """Partitioning requires at least one reducer."""


class DuplicateEventId(ValueError):
    """An event stream repeated an event_id."""


@dataclass(frozen=True)
class IntermediateCount:
    """Map output: a pre-summed count for one (category, room) key."""

    key: CompositeKey
    count: int


@dataclass(frozen=True)
class Case1Result:
    """Visitor view: totals per tag category plus the full composite breakdown."""

    per_category_totals: dict[TagCategory, int]
    composite_breakdown: dict[CompositeKey, int]

    def total(self) -> int:
        return sum(self.per_category_totals.values())


@dataclass(frozen=True)
class Case2Result:
    """Room view: totals per room plus each room's per-category breakdown."""

    per_room_totals: dict[RoomId, int]
    per_room_breakdown: dict[RoomId, dict[TagCategory, int]]

    def total(self) -> int:
        return sum(self.per_room_totals.values())


@dataclass(frozen=True)
class PartitionPlan:
    """Deterministic key -> reducer ordinal assignment."""

    reducer_count: int
    assignment: dict[CompositeKey, int]


FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; fixed here as the cross-platform partition hash."""
    h = FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h


def map_batch(events: list[VisitorEvent], room: RoomId) -> list[IntermediateCount]:
    """Tally one room's event batch into pre-summed per-key counts.

    Counts sum to the batch length; keys are emitted in canonical order.
    """
    tally: Counter[TagCategory] = Counter()
    for ev in events:
        if ev.room != room:
            raise ForeignRoomEvent(f"event {ev.event_id} belongs to room{ev.room}, not room{room}")
        tally[ev.category] += 1
    return [
        IntermediateCount(CompositeKey(cat, room), tally[cat])
        for cat in CATEGORIES
        if tally[cat] > 0
    ]


def partition(keys: set[CompositeKey], reducer_count: int) -> PartitionPlan:
    """Assign each key to ordinal fnv1a64(canonical text) mod reducer_count."""
    if reducer_count == 0:
        raise ZeroReducers("reducer_count must be >= 1")
    assignment = {
        key: fnv1a64(key.text().encode("utf-8")) % reducer_count
        for key in sorted(keys, key=CompositeKey.sort_key)
    }
    return PartitionPlan(reducer_count, assignment)


def reduce_partition(shards: list[IntermediateCount]) -> dict[CompositeKey, int]:
    """Sum counts per key across any number of map outputs, in any order."""
    out: dict[CompositeKey, int] = {}
    for item in shards:
        out[item.key] = out.get(item.key, 0) + item.count
    return out


def aggregate_case1(reduced: dict[CompositeKey, int]) -> Case1Result:
    """Regroup a reduced map by category. All three categories are always present."""
    totals = {cat: 0 for cat in CATEGORIES}
    breakdown: dict[CompositeKey, int] = {}
    for key in sorted(reduced, key=CompositeKey.sort_key):
        breakdown[key] = reduced[key]
        totals[key.category] += reduced[key]
    return Case1Result(totals, breakdown)


def aggregate_case2(reduced: dict[CompositeKey, int]) -> Case2Result:
    """Regroup a reduced map by room; rooms absent from the input are absent here."""
    rooms = sorted({key.room for key in reduced})
    breakdown = {room: {cat: 0 for cat in CATEGORIES} for room in rooms}
    for key, count in reduced.items():
        breakdown[key.room][key.category] += count
    totals = {room: sum(cats.values()) for room, cats in breakdown.items()}
    return Case2Result(totals, breakdown)


def sequential_oracle(events: list[VisitorEvent]) -> tuple[Case1Result, Case2Result]:
    """Single-pass reference tally, independent of the map/partition/reduce path.

    Definitionally correct: used by the test suite to check every
    distributed execution, so it must not share the pipeline's machinery.
    """
    seen: set[int] = set()
    cat_totals = {cat: 0 for cat in CATEGORIES}
    composite: dict[CompositeKey, int] = {}
    per_room: dict[RoomId, dict[TagCategory, int]] = {}
    for ev in events:
        if ev.event_id in seen:
            raise DuplicateEventId(f"event id {ev.event_id} repeated")
        seen.add(ev.event_id)
        cat_totals[ev.category] += 1
        key = CompositeKey(ev.category, ev.room)
        composite[key] = composite.get(key, 0) + 1
        per_room.setdefault(ev.room, {cat: 0 for cat in CATEGORIES})[ev.category] += 1

    composite = {k: composite[k] for k in sorted(composite, key=CompositeKey.sort_key)}
    room_breakdown = {room: per_room[room] for room in sorted(per_room)}
    room_totals = {room: sum(cats.values()) for room, cats in room_breakdown.items()}
    return (
        Case1Result(cat_totals, composite),
        Case2Result(room_totals, room_breakdown),
    )
