"""Deterministic discrete-event harness: virtual clock, seeded links, fault injection.

run_scenario executes a whole cluster of NodeProcess state machines over a
virtual clock.  All randomness (visitor placement, link delay/jitter,
drops, duplicates) flows from generators derived from the scenario seed,
and same-timestamp events fire in insertion order, so identical scenarios
produce byte-identical results.

The harness also keeps the books the test suite audits: which generated
events were absorbed, lost to crashes, or still unreported at the end;
every role change; and any same-term double-master occurrence (there must
never be one).
"""

from __future__ import annotations

import heapq
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Union

from .domain import CATEGORIES, TagCategory, VisitorEvent
from .mapreduce import FNV64_PRIME
from .membership import ClusterConfig, Role, default_endpoints
from .node import BROADCAST, NodeProcess
from .reporting import CycleReport
from .storage import ReportLog, record_from_report


class MatrixMismatch(ValueError):
    """The explicit visitor matrix total disagrees with the declared visitor count."""


class UnknownNode(ValueError):
    pass


@dataclass(frozen=True)
class LinkModel:
    """Unreliable-datagram link: fixed delay plus jitter, loss and duplication."""

    base_delay: int = 10
    jitter: int = 5
    drop_probability: float = 0.0
    duplicate_probability: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must be within [0, 1]")
        if not 0.0 <= self.duplicate_probability <= 1.0:
            raise ValueError("duplicate_probability must be within [0, 1]")
        if self.base_delay < 0 or self.jitter < 0:
            raise ValueError("delays must be non-negative")


@dataclass(frozen=True)
class CrashNode:
    at: int
    node: int


@dataclass(frozen=True)
class RecoverNode:
    at: int
    node: int


@dataclass(frozen=True)
class Partition:
    at: int
    side_a: frozenset[int]
    side_b: frozenset[int]


@dataclass(frozen=True)
class Heal:
    at: int


@dataclass(frozen=True)
class DropRate:
    """Override the drop probability for one directed link or for 'all'."""

    at: int
    link: Union[str, tuple[int, int]]
    probability: float


FaultEvent = Union[CrashNode, RecoverNode, Partition, Heal, DropRate]


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything a run needs; a pure value so runs are replayable by value."""

    scenario_id: str
    seed: int
    cluster: ClusterConfig
    rooms: int
    visitors: int | None = None
    matrix: dict[tuple[TagCategory, int], int] | None = None
    tour: int | None = None  # event window; defaults to one cycle period
    duration: int = 0
    reducer_count: int = 3
    faults: tuple[FaultEvent, ...] = ()
    link: LinkModel = field(default_factory=LinkModel)
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.rooms < 1:
            raise ValueError("need at least one room")
        if self.rooms > self.cluster.node_count:
            raise ValueError("more rooms than nodes")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.visitors is None and self.matrix is None:
            raise ValueError("give either a visitor total or an explicit matrix")
        if self.matrix is not None:
            for (_, room), count in self.matrix.items():
                if count < 0:
                    raise ValueError("matrix entries must be non-negative")
                if not 0 <= room < self.rooms:
                    raise ValueError(f"matrix names room{room}, scenario has {self.rooms} rooms")

    @property
    def tour_span(self) -> int:
        return self.cluster.cycle_period if self.tour is None else self.tour


def build_cluster(node_count: int, **overrides) -> ClusterConfig:
    """ClusterConfig with synthesized localhost endpoints; kwargs override timings."""
    return ClusterConfig(
        node_count=node_count,
        endpoints=default_endpoints(node_count),
        initial_master=overrides.pop("initial_master", 0),
        **overrides,
    )


def generate_stream(spec: ScenarioSpec) -> list[VisitorEvent]:
    """Simulated RFID reads for one tour, deterministic in the scenario seed.

    Explicit matrix cells are honored exactly; otherwise visitors land on
    uniformly random (category, room) cells.  Timestamps spread uniformly
    over the tour span; event ids are assigned in time order so each
    room's stream is non-decreasing.
    """
    rng = random.Random(spec.seed)
    placements: list[tuple[TagCategory, int]] = []
    if spec.matrix is not None:
        total = sum(spec.matrix.values())
        if spec.visitors is not None and total != spec.visitors:
            raise MatrixMismatch(f"matrix total {total} != declared visitors {spec.visitors}")
        for cat in CATEGORIES:
            for room in range(spec.rooms):
                placements.extend([(cat, room)] * spec.matrix.get((cat, room), 0))
    else:
        for _ in range(spec.visitors or 0):
            placements.append((rng.choice(CATEGORIES), rng.randrange(spec.rooms)))

    span = max(1, spec.tour_span)
    stamped = [(rng.randrange(span), cat, room) for cat, room in placements]
    stamped.sort(key=lambda item: item[0])
    return [
        VisitorEvent(event_id=i, category=cat, room=room, timestamp=t)
        for i, (t, cat, room) in enumerate(stamped)
    ]


@dataclass
class RunResult:
    """A finished run plus the bookkeeping the test suite audits."""

    reports: list[CycleReport]
    generated: list[VisitorEvent]
    lost: list[VisitorEvent]
    unreported: list[VisitorEvent]
    safety_violations: list[str]
    role_history: list[tuple[int, int, Role, int]]  # (time, node, role, term)
    stats: Counter
    all_nodes_dead: bool
    end_time: int


_MASK64 = 0xFFFFFFFFFFFFFFFF


class Simulation:
    """Single-threaded event loop over a virtual clock; fully deterministic."""

    def __init__(self, spec: ScenarioSpec, sink: ReportLog | None = None):
        self.spec = spec
        self.sink = sink
        self.cluster = spec.cluster
        self.now = 0
        self._counter = 0
        self._heap: list[tuple[int, int, int, tuple]] = []
        self.rng = random.Random(spec.seed ^ 0x9E3779B97F4A7C15)

        self.nodes: dict[int, NodeProcess | None] = {}
        self._tick_gen: dict[int, int] = {}
        self._role_cache: dict[int, tuple[Role, int]] = {}

        self.cut: tuple[frozenset[int], frozenset[int]] | None = None
        self.drop_all: float | None = None
        self.drop_links: dict[tuple[int, int], float] = {}

        self.reports: list[CycleReport] = []
        self.lost: list[VisitorEvent] = []
        self.safety_violations: list[str] = []
        self.role_history: list[tuple[int, int, Role, int]] = []
        self.stats: Counter = Counter()
        self.all_nodes_dead = False
        self._digest = 0xCBF29CE484222325

        for node_id in self.cluster.node_ids:
            self._spawn(node_id, at=0)

    # -------------------------------------------------------------- scheduling

    _START, _TICK, _DELIVER, _VISITOR, _FAULT = range(5)

    def _schedule(self, at: int, kind: int, payload: tuple) -> None:
        heapq.heappush(self._heap, (at, self._counter, kind, payload))
        self._counter += 1

    def _spawn(self, node_id: int, at: int) -> None:
        node = NodeProcess(
            node_id,
            self.cluster,
            rooms=self.spec.rooms,
            reducer_count=self.spec.reducer_count,
            scenario_id=self.spec.scenario_id,
        )
        node.digest_fn = self._digest_snapshot
        self.nodes[node_id] = node
        self._role_cache[node_id] = (node.role_state.role, node.role_state.term)
        gen = self._tick_gen.get(node_id, 0) + 1
        self._tick_gen[node_id] = gen
        self._schedule(at, self._START, (node_id,))
        phase = (node_id * self.cluster.heartbeat_period) // max(1, self.cluster.node_count)
        self._schedule(at + self.cluster.heartbeat_period + phase, self._TICK, (node_id, gen))

    def inject_fault(self, fault: FaultEvent) -> None:
        if fault.at < self.now:
            raise ValueError(f"fault at {fault.at} is in the past (now {self.now})")
        for attr in ("node",):
            node = getattr(fault, attr, None)
            if node is not None and node not in self.cluster.endpoints:
                raise UnknownNode(f"fault names unknown node {node}")
        if isinstance(fault, Partition):
            for node in fault.side_a | fault.side_b:
                if node not in self.cluster.endpoints:
                    raise UnknownNode(f"partition names unknown node {node}")
        self._schedule(fault.at, self._FAULT, (fault,))

    # -------------------------------------------------------------- link model

    def _reachable(self, src: int, dst: int) -> bool:
        if self.cut is None:
            return True
        a, b = self.cut
        return (src in a and dst in a) or (src in b and dst in b)

    def _drop_probability(self, src: int, dst: int) -> float:
        if (src, dst) in self.drop_links:
            return self.drop_links[(src, dst)]
        if self.drop_all is not None:
            return self.drop_all
        return self.spec.link.drop_probability

    def _digest_mix(self, src: int, dst: int, size: int) -> None:
        mix = (self.now & _MASK64) ^ (src << 44) ^ ((dst & 0xFFF) << 52) ^ size
        self._digest = ((self._digest ^ mix) * FNV64_PRIME) & _MASK64

    def _digest_snapshot(self) -> dict[str, int]:
        return {
            "commit_time": self.now,
            "messages": self.stats["sent"],
            "data_messages": self.stats["sent_data"],
            "dropped": self.stats["dropped"],
            "duplicated": self.stats["duplicated"],
            "faults": self.stats["faults"],
            "log": self._digest,
        }

    def _transmit(self, src: int, dst: int, data: bytes) -> None:
        if not self._reachable(src, dst):
            self.stats["dropped"] += 1
            return
        if self._drop_probability(src, dst) > self.rng.random():
            self.stats["dropped"] += 1
            return
        link = self.spec.link
        copies = 1
        if link.duplicate_probability and self.rng.random() < link.duplicate_probability:
            copies = 2
            self.stats["duplicated"] += 1
        for _ in range(copies):
            delay = link.base_delay
            if link.jitter:
                delay += self.rng.randrange(link.jitter + 1)
            self._schedule(self.now + delay, self._DELIVER, (src, dst, data))

    def _process_sends(self, src: int, sends: list[tuple[int, bytes]]) -> None:
        is_data = {b"TASK", b"MAP_OUT", b"RED_OUT", b"CYCLE_DONE"}
        for dst, data in sends:
            kind = data.split(b" ", 2)[1]
            targets = (
                [n for n in self.cluster.node_ids if n != src] if dst == BROADCAST else [dst]
            )
            for target in targets:
                self.stats["sent"] += 1
                if kind in is_data:
                    self.stats["sent_data"] += 1
                self._digest_mix(src, target, len(data))
                if target == src:
                    self._schedule(self.now, self._DELIVER, (src, src, data))
                else:
                    self._transmit(src, target, data)

    # -------------------------------------------------------------- node wrapper

    def _interact(self, node_id: int, sends: list[tuple[int, bytes]]) -> None:
        self._process_sends(node_id, sends)
        node = self.nodes[node_id]
        assert node is not None
        if node.outbox_commits:
            for report in node.outbox_commits:
                self.reports.append(report)
                if self.sink is not None:
                    self.sink.append_report(
                        record_from_report(self.spec.scenario_id, report, self.now)
                    )
            node.outbox_commits.clear()
        state = node.role_state
        cached = self._role_cache[node_id]
        if cached != (state.role, state.term):
            self._role_cache[node_id] = (state.role, state.term)
            self.role_history.append((self.now, node_id, state.role, state.term))
            if state.role is Role.MASTER:
                for other_id, other in self.nodes.items():
                    if other is None or other_id == node_id:
                        continue
                    if (
                        other.role_state.role is Role.MASTER
                        and other.role_state.term == state.term
                    ):
                        self.safety_violations.append(
                            f"t={self.now}: nodes {other_id} and {node_id} "
                            f"both master at term {state.term}"
                        )

    # -------------------------------------------------------------- fault handling

    def _apply_fault(self, fault: FaultEvent) -> None:
        self.stats["faults"] += 1
        if isinstance(fault, CrashNode):
            node = self.nodes.get(fault.node)
            if node is None:
                return
            self.lost.extend(node.buffer)
            self.nodes[fault.node] = None
            self._tick_gen[fault.node] += 1
            if all(n is None for n in self.nodes.values()):
                self.all_nodes_dead = True
        elif isinstance(fault, RecoverNode):
            if self.nodes.get(fault.node) is None:
                self._spawn(fault.node, at=self.now)
        elif isinstance(fault, Partition):
            listed = fault.side_a | fault.side_b
            rest = frozenset(self.cluster.node_ids) - listed
            self.cut = (frozenset(fault.side_a) | rest, frozenset(fault.side_b))
        elif isinstance(fault, Heal):
            self.cut = None
        elif isinstance(fault, DropRate):
            if fault.link == "all":
                self.drop_all = fault.probability
            else:
                self.drop_links[tuple(fault.link)] = fault.probability
        else:
            raise TypeError(f"unknown fault {fault!r}")

    # -------------------------------------------------------------- main loop

    def run(self) -> RunResult:
        spec = self.spec
        events = generate_stream(spec)
        for ev in events:
            self._schedule(ev.timestamp, self._VISITOR, (ev,))
        for fault in spec.faults:
            self.inject_fault(fault)

        while self._heap:
            at, _, kind, payload = heapq.heappop(self._heap)
            if at > spec.duration:
                break
            self.now = at
            if kind == self._START:
                (node_id,) = payload
                node = self.nodes[node_id]
                if node is not None:
                    self._interact(node_id, node.on_start(at))
            elif kind == self._TICK:
                node_id, gen = payload
                node = self.nodes[node_id]
                if node is None or gen != self._tick_gen[node_id]:
                    continue
                self._interact(node_id, node.on_tick(at))
                self._schedule(at + self.cluster.heartbeat_period, self._TICK, (node_id, gen))
            elif kind == self._DELIVER:
                src, dst, data = payload
                if not self._reachable(src, dst):
                    self.stats["dropped"] += 1
                    continue
                node = self.nodes[dst]
                if node is None:
                    self.stats["to_dead"] += 1
                    continue
                self._interact(dst, node.on_datagram(at, data))
            elif kind == self._VISITOR:
                (ev,) = payload
                node = self.nodes[ev.room] if ev.room in self.nodes else None
                if node is None:
                    self.lost.append(ev)
                else:
                    node.absorb_visitor(at, ev)
            elif kind == self._FAULT:
                (fault,) = payload
                self._apply_fault(fault)
                if self.all_nodes_dead:
                    break

        unreported = []
        for node in self.nodes.values():
            if node is not None:
                unreported.extend(node.buffer)
        unreported.sort(key=lambda ev: ev.event_id)
        return RunResult(
            reports=self.reports,
            generated=events,
            lost=self.lost,
            unreported=unreported,
            safety_violations=self.safety_violations,
            role_history=self.role_history,
            stats=self.stats,
            all_nodes_dead=self.all_nodes_dead,
            end_time=min(self.now, spec.duration),
        )


def run_scenario(spec: ScenarioSpec, sink: ReportLog | None = None) -> RunResult:
    """Execute a scenario to completion; pure function of the spec (plus sink I/O)."""
    return Simulation(spec, sink=sink).run()
