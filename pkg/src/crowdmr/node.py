"""Transport-agnostic node logic: one object per cluster member.

A NodeProcess is driven entirely by three entry points -- on_start, on_tick
(called every heartbeat period), and on_datagram -- and communicates only
through the byte frames it returns, so the same logic runs unchanged on the
simulated network and on real UDP sockets.

Protocol sketch (payload fields ride in the wire frame's k=v section):

* Every node broadcasts HB each tick with its role letter; any received
  frame refreshes the sender's liveness.  HELLO announces a (re)boot and
  resets the sender's dedup window at each receiver.
* A worker whose master has been silent past the heartbeat timeout, and
  whose degree meets the two-thirds threshold, claims leadership at
  term+1 (LEADER_CLAIM).  Receivers ack the first strictly-higher-term
  claim they see (LEADER_ACK); an ack quorum of ceil(2N/3) makes the
  candidate master (LEADER_ANNOUNCE).  A master that fails its periodic
  connectivity check abdicates (ABDICATE).
* The master drives counting cycles: TASK(c, attempt, rooms, red) names
  the participant rooms and the reducer nodes by ordinal.  Mappers freeze
  a snapshot of their buffered visitor events per cycle and send absolute
  per-key tallies (MAP_OUT) to the owning reducers; reducers sum and
  report RED_OUT to the master; the master aggregates, persists, and
  broadcasts CYCLE_DONE(c, rooms).  Every data message is an absolute
  restatement, so duplicates and resends are harmless, and any node that
  already saw a commit answers stale cycle traffic with a CYCLE_DONE echo.
* A mapper clears a snapshot's events only when a CYCLE_DONE lists its
  room among the committed participants; otherwise the events dissolve
  back into the buffer for the next cycle.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

from . import mapreduce
from .domain import CompositeKey, NodeId, VisitorEvent, parse_composite_key
from .membership import (
    ClusterConfig,
    ConnectivityCheckDue,
    HeartbeatTimeoutOnMaster,
    HigherTermObserved,
    LeaderAckQuorum,
    LeaderClaimReceived,
    Role,
    RoleState,
    BroadcastAbdicate,
    BroadcastAnnounce,
    BroadcastClaim,
    SendLeaderAck,
    eligibility_threshold,
    step_role,
)
from .reporting import CycleReport
from .wire import DedupWindow, Message, MsgType, WireError, chunk_counts, decode, encode

BROADCAST = -1

Send = tuple[int, bytes]


def _join_ids(ids) -> str:
    return ",".join(str(i) for i in ids)


def _split_ids(text: str) -> tuple[int, ...]:
    if not text:
        return ()
    return tuple(int(tok) for tok in text.split(","))


@dataclass
class _MapTask:
    """Latest TASK a mapper is answering for one cycle."""

    term: int
    attempt: int
    master: NodeId
    reducer_nodes: tuple[NodeId, ...]


@dataclass
class _RoomAssembly:
    parts_total: int | None = None
    parts_seen: set[int] = field(default_factory=set)
    items: dict[str, int] = field(default_factory=dict)

    def complete(self) -> bool:
        return self.parts_total is not None and len(self.parts_seen) == self.parts_total


@dataclass
class _RedSlot:
    """One reducer's assembly state for a (cycle, task term, attempt) triple."""

    master: NodeId | None = None
    ordinal: int | None = None
    expected_rooms: tuple[int, ...] | None = None
    rooms: dict[int, _RoomAssembly] = field(default_factory=dict)
    last_sent: int | None = None

    def complete(self) -> bool:
        if self.expected_rooms is None:
            return False
        return all(r in self.rooms and self.rooms[r].complete() for r in self.expected_rooms)


@dataclass
class _MasterTask:
    cycle: int
    attempt: int
    participants: tuple[int, ...]
    reducer_nodes: tuple[NodeId, ...]
    issued_at: int
    shards: dict[int, _RoomAssembly] = field(default_factory=dict)  # ordinal -> assembly


class NodeProcess:
    """One cluster member's full state machine (membership + counting)."""

    def __init__(
        self,
        node_id: NodeId,
        cluster: ClusterConfig,
        *,
        rooms: int,
        reducer_count: int = 3,
        scenario_id: str = "scenario",
    ):
        self.node_id = node_id
        self.cluster = cluster
        self.rooms = rooms
        self.reducer_count = max(1, reducer_count)
        self.scenario_id = scenario_id
        self.room: int | None = node_id if node_id < rooms else None

        if node_id == cluster.initial_master:
            self.role_state = RoleState(node_id, Role.MASTER, 0, node_id)
        else:
            self.role_state = RoleState(node_id, Role.WORKER, 0, cluster.initial_master)
        self.role_log: list[tuple[int, Role, int]] = []

        self.last_heard: dict[NodeId, int] = {}
        self.master_seen_at: int | None = None
        self.last_conn_check: int | None = None

        self.seq = 0
        self.dedup = DedupWindow()

        # Mapper side.
        self.buffer: list[VisitorEvent] = []
        self.snapshots: dict[int, list[VisitorEvent]] = {}
        self.snapshot_items: dict[int, list[tuple[str, int]]] = {}
        self.map_tasks: dict[int, _MapTask] = {}
        self.last_map_send: dict[int, int] = {}

        # Reducer side.
        self.red_slots: dict[tuple[int, int, int], _RedSlot] = {}

        # Master side.
        self.master_task: _MasterTask | None = None
        self._attempts: dict[int, int] = {}

        # Commit knowledge shared by every role.
        self.committed_cycle = 0
        self.commit_meta: dict[int, tuple[int, tuple[int, ...]]] = {}

        self.claim_acks: set[NodeId] = set()
        self.claim_sent_at: int | None = None

        self.outbox_commits: list[CycleReport] = []
        self.stats: Counter = Counter()
        self.digest_fn: Callable[[], dict[str, int]] = lambda: {}

        self._resend_interval = 2 * cluster.heartbeat_period
        self._retask_interval = cluster.heartbeat_timeout

    # ------------------------------------------------------------------ plumbing

    def _emit(self, dst: int, msg_type: MsgType, payload: dict[str, str] | None = None) -> Send:
        msg = Message(msg_type, self.node_id, self.role_state.term, self.seq, payload or {})
        self.seq += 1
        self.stats[f"sent_{msg_type.value}"] += 1
        return (dst, encode(msg))

    def _record_alive(self, peer: NodeId, at: int) -> None:
        if peer == self.node_id:
            return
        prev = self.last_heard.get(peer)
        if prev is None or at > prev:
            self.last_heard[peer] = at

    def _live_nodes(self, now: int) -> list[NodeId]:
        timeout = self.cluster.heartbeat_timeout
        live = [p for p, at in self.last_heard.items() if now - at <= timeout]
        live.append(self.node_id)
        return sorted(set(live))

    def _degree(self, now: int) -> int:
        return len(self._live_nodes(now))

    def _apply(self, now: int, event) -> list[Send]:
        """Run one role transition and translate its actions into frames."""
        old = self.role_state
        new, actions = step_role(old, event)
        sends: list[Send] = []
        if new is not old:
            self.role_state = new
            self.role_log.append((now, new.role, new.term))
            if old.role is Role.MASTER and new.role is not Role.MASTER:
                self.master_task = None
            if new.role is Role.MASTER:
                self.master_task = None
                self._attempts = {}
            if new.role is not Role.CANDIDATE:
                self.claim_acks = set()
                self.claim_sent_at = None
            if new.known_master is not None and new.known_master != self.node_id:
                self.master_seen_at = now
        for action in actions:
            if isinstance(action, BroadcastClaim):
                self.claim_acks = {self.node_id}
                self.claim_sent_at = now
                sends.append(self._emit(BROADCAST, MsgType.LEADER_CLAIM, {"d": str(action.degree)}))
            elif isinstance(action, BroadcastAnnounce):
                sends.append(self._emit(BROADCAST, MsgType.LEADER_ANNOUNCE))
            elif isinstance(action, BroadcastAbdicate):
                self.master_seen_at = None
                sends.append(self._emit(BROADCAST, MsgType.ABDICATE))
            elif isinstance(action, SendLeaderAck):
                self.master_seen_at = now  # give the claimant one timeout to win
                sends.append(self._emit(action.to, MsgType.LEADER_ACK))
        return sends

    # ------------------------------------------------------------------ lifecycle

    def on_start(self, now: int) -> list[Send]:
        self.master_seen_at = now
        self.last_conn_check = now
        self.role_log.append((now, self.role_state.role, self.role_state.term))
        return [self._emit(BROADCAST, MsgType.HELLO)]

    def absorb_visitor(self, now: int, event: VisitorEvent) -> None:
        self.buffer.append(event)

    def on_tick(self, now: int) -> list[Send]:
        sends = [self._emit(BROADCAST, MsgType.HB, {"r": self.role_state.role.value})]
        state = self.role_state

        if state.role is not Role.MASTER:
            silent = (
                self.master_seen_at is None
                or now - self.master_seen_at > self.cluster.heartbeat_timeout
            )
            stalled = (
                state.role is Role.CANDIDATE
                and self.claim_sent_at is not None
                and now - self.claim_sent_at > self.cluster.heartbeat_timeout
            )
            if (silent and state.role is Role.WORKER) or (silent and stalled):
                sends.extend(
                    self._apply(
                        now,
                        HeartbeatTimeoutOnMaster(self._degree(now), self.cluster.node_count),
                    )
                )

        if now - (self.last_conn_check or 0) >= self.cluster.connectivity_check_period:
            self.last_conn_check = now
            sends.extend(
                self._apply(now, ConnectivityCheckDue(self._degree(now), self.cluster.node_count))
            )

        if self.role_state.role is Role.MASTER:
            sends.extend(self._drive_cycle(now))

        sends.extend(self._resend_map_outputs(now))
        sends.extend(self._resend_reduce_outputs(now))
        return sends

    # ------------------------------------------------------------------ receive path

    def on_datagram(self, now: int, data: bytes) -> list[Send]:
        try:
            msg = decode(data)
        except WireError:
            self.stats["malformed_dropped"] += 1
            return []
        if msg.sender == self.node_id:
            return []
        if msg.msg_type is MsgType.HELLO:
            self.dedup.reset(msg.sender)
        fresh = self.dedup.check(msg.sender, msg.seq)
        self._record_alive(msg.sender, now)
        if not fresh:
            self.stats["duplicates_suppressed"] += 1
            return []
        if msg.sender == self.role_state.known_master:
            self.master_seen_at = now
        handler = {
            MsgType.HELLO: self._on_hello,
            MsgType.HB: self._on_hb,
            MsgType.HB_ACK: self._on_hb,
            MsgType.LEADER_CLAIM: self._on_claim,
            MsgType.LEADER_ACK: self._on_claim_ack,
            MsgType.LEADER_ANNOUNCE: self._on_announce,
            MsgType.ABDICATE: self._on_abdicate,
            MsgType.TASK: self._on_task,
            MsgType.MAP_OUT: self._on_map_out,
            MsgType.RED_OUT: self._on_red_out,
            MsgType.CYCLE_DONE: self._on_cycle_done,
        }[msg.msg_type]
        try:
            return handler(now, msg)
        except (KeyError, ValueError):
            # Structurally valid frame with nonsense fields: drop it.
            self.stats["malformed_dropped"] += 1
            return []

    def _on_hello(self, now: int, msg: Message) -> list[Send]:
        sends = []
        if msg.term > self.role_state.term:
            sends.extend(self._apply(now, HigherTermObserved(msg.term)))
        sends.append(self._emit(msg.sender, MsgType.HB_ACK, {"r": self.role_state.role.value}))
        return sends

    def _on_hb(self, now: int, msg: Message) -> list[Send]:
        if msg.payload.get("r") == Role.MASTER.value:
            self.master_seen_at = now
            return self._apply(now, HigherTermObserved(msg.term, leader=msg.sender))
        if msg.term > self.role_state.term:
            return self._apply(now, HigherTermObserved(msg.term))
        return []

    def _on_claim(self, now: int, msg: Message) -> list[Send]:
        degree = int(msg.payload.get("d", "0"))
        return self._apply(now, LeaderClaimReceived(msg.term, msg.sender, degree))

    def _on_claim_ack(self, now: int, msg: Message) -> list[Send]:
        state = self.role_state
        if state.role is not Role.CANDIDATE or msg.term != state.term:
            return []
        self.claim_acks.add(msg.sender)
        if len(self.claim_acks) >= eligibility_threshold(self.cluster.node_count):
            sends = self._apply(now, LeaderAckQuorum(state.term))
            if self.role_state.role is Role.MASTER:
                sends.extend(self._drive_cycle(now))
            return sends
        return []

    def _on_announce(self, now: int, msg: Message) -> list[Send]:
        self.master_seen_at = now
        return self._apply(now, HigherTermObserved(msg.term, leader=msg.sender))

    def _on_abdicate(self, now: int, msg: Message) -> list[Send]:
        sends = []
        if msg.term > self.role_state.term:
            sends.extend(self._apply(now, HigherTermObserved(msg.term)))
        if msg.sender == self.role_state.known_master:
            self.master_seen_at = None  # start counting silence immediately
        return sends

    # ------------------------------------------------------------------ cycle protocol

    def _echo_cycle_done(self, cycle: int, to: NodeId) -> list[Send]:
        """Tell a node stuck on an already-committed cycle what we know."""
        sends = []
        for c in {cycle, self.committed_cycle}:
            meta = self.commit_meta.get(c)
            if meta is not None:
                attempt, rooms = meta
                sends.append(
                    self._emit(
                        to,
                        MsgType.CYCLE_DONE,
                        {"c": str(c), "a": str(attempt), "rooms": _join_ids(rooms)},
                    )
                )
        return sends

    def _drive_cycle(self, now: int) -> list[Send]:
        due = now // self.cluster.cycle_period
        target = self.committed_cycle + 1
        if target > due:
            return []
        task = self.master_task
        if task is not None and task.cycle == target:
            if now - task.issued_at < self._retask_interval:
                return []
        attempt = self._attempts.get(target, 0) + 1
        self._attempts[target] = attempt
        live = self._live_nodes(now)
        participants = tuple(n for n in live if n < self.rooms)
        reducer_nodes = tuple(live[: min(self.reducer_count, len(live))])
        self.master_task = _MasterTask(target, attempt, participants, reducer_nodes, now)
        payload = {
            "c": str(target),
            "a": str(attempt),
            "rooms": _join_ids(participants),
            "red": _join_ids(reducer_nodes),
        }
        sends = [self._emit(BROADCAST, MsgType.TASK, dict(payload))]
        # The master is a participant too: process its own task copy directly.
        own = Message(MsgType.TASK, self.node_id, self.role_state.term, self.seq - 1, payload)
        sends.extend(self._handle_task_body(now, own))
        return sends

    def _on_task(self, now: int, msg: Message) -> list[Send]:
        state = self.role_state
        if msg.term < state.term:
            return []
        sends = []
        if msg.term > state.term or (state.known_master is None and state.role is not Role.MASTER):
            sends.extend(self._apply(now, HigherTermObserved(msg.term, leader=msg.sender)))
        self.master_seen_at = now
        sends.extend(self._handle_task_body(now, msg))
        return sends

    def _handle_task_body(self, now: int, msg: Message) -> list[Send]:
        cycle = int(msg.payload["c"])
        attempt = int(msg.payload["a"])
        participants = _split_ids(msg.payload["rooms"])
        reducer_nodes = _split_ids(msg.payload["red"])
        if cycle <= self.committed_cycle:
            return self._echo_cycle_done(cycle, msg.sender) if msg.sender != self.node_id else []
        sends: list[Send] = []

        if self.room is not None and self.room in participants:
            if cycle not in self.snapshots:
                self.snapshots[cycle] = list(self.buffer)
                tally = mapreduce.map_batch(self.snapshots[cycle], self.room)
                self.snapshot_items[cycle] = [(ic.key.text(), ic.count) for ic in tally]
            self.map_tasks[cycle] = _MapTask(msg.term, attempt, msg.sender, reducer_nodes)
            sends.extend(self._send_map_output(now, cycle))

        if self.node_id in reducer_nodes:
            ordinal = reducer_nodes.index(self.node_id)
            slot = self.red_slots.setdefault((cycle, msg.term, attempt), _RedSlot())
            slot.master = msg.sender
            slot.ordinal = ordinal
            slot.expected_rooms = participants
            sends.extend(self._maybe_send_reduce_output(now, (cycle, msg.term, attempt), slot))
        return sends

    def _send_map_output(self, now: int, cycle: int) -> list[Send]:
        task = self.map_tasks.get(cycle)
        if task is None or self.room is None:
            return []
        self.last_map_send[cycle] = now
        items = self.snapshot_items.get(cycle, [])
        count = len(task.reducer_nodes)
        plan = mapreduce.partition(
            {parse_composite_key(key) for key, _ in items}, count
        )
        by_ordinal: dict[int, list[tuple[str, int]]] = {o: [] for o in range(count)}
        for key_text, n in items:
            by_ordinal[plan.assignment[parse_composite_key(key_text)]].append((key_text, n))
        sends = []
        meta_base = {
            "c": str(cycle),
            "a": str(task.attempt),
            "tt": str(task.term),
            "r": str(self.room),
        }
        for ordinal, node in enumerate(task.reducer_nodes):
            meta = dict(meta_base)
            meta["o"] = str(ordinal)
            for payload in chunk_counts(meta, by_ordinal[ordinal]):
                sends.append(self._emit(node, MsgType.MAP_OUT, payload))
        return sends

    def _resend_map_outputs(self, now: int) -> list[Send]:
        sends = []
        for cycle in sorted(self.snapshots):
            if now - self.last_map_send.get(cycle, -(1 << 60)) >= self._resend_interval:
                sends.extend(self._send_map_output(now, cycle))
        return sends

    @staticmethod
    def _split_payload(msg: Message) -> tuple[dict[str, str], dict[str, int]]:
        meta: dict[str, str] = {}
        items: dict[str, int] = {}
        for k, v in msg.payload.items():
            if "-" in k:
                items[k] = int(v)
            else:
                meta[k] = v
        return meta, items

    def _on_map_out(self, now: int, msg: Message) -> list[Send]:
        meta, items = self._split_payload(msg)
        cycle = int(meta["c"])
        if cycle <= self.committed_cycle:
            return self._echo_cycle_done(cycle, msg.sender)
        key = (cycle, int(meta["tt"]), int(meta["a"]))
        slot = self.red_slots.setdefault(key, _RedSlot())
        slot.ordinal = int(meta["o"])
        room = slot.rooms.setdefault(int(meta["r"]), _RoomAssembly())
        room.parts_total = int(meta["pn"])
        room.parts_seen.add(int(meta["p"]))
        room.items.update(items)
        return self._maybe_send_reduce_output(now, key, slot)

    def _maybe_send_reduce_output(
        self, now: int, key: tuple[int, int, int], slot: _RedSlot
    ) -> list[Send]:
        if slot.master is None or slot.ordinal is None or not slot.complete():
            return []
        slot.last_sent = now
        cycle, task_term, attempt = key
        shards = [
            mapreduce.IntermediateCount(parse_composite_key(k), n)
            for room in slot.expected_rooms or ()
            for k, n in slot.rooms[room].items.items()
        ]
        summed = mapreduce.reduce_partition(shards)
        items = [(k.text(), n) for k, n in summed.items()]
        meta = {
            "c": str(cycle),
            "a": str(attempt),
            "tt": str(task_term),
            "o": str(slot.ordinal),
        }
        return [
            self._emit(slot.master, MsgType.RED_OUT, payload)
            for payload in chunk_counts(meta, items)
        ]

    def _resend_reduce_outputs(self, now: int) -> list[Send]:
        sends = []
        for key, slot in self.red_slots.items():
            if key[0] <= self.committed_cycle or slot.last_sent is None:
                continue
            if now - slot.last_sent >= self._resend_interval:
                sends.extend(self._maybe_send_reduce_output(now, key, slot))
        return sends

    def _on_red_out(self, now: int, msg: Message) -> list[Send]:
        meta, items = self._split_payload(msg)
        cycle = int(meta["c"])
        if cycle <= self.committed_cycle:
            return self._echo_cycle_done(cycle, msg.sender)
        task = self.master_task
        if (
            self.role_state.role is not Role.MASTER
            or task is None
            or task.cycle != cycle
            or task.attempt != int(meta["a"])
            or int(meta["tt"]) != self.role_state.term
        ):
            return []
        shard = task.shards.setdefault(int(meta["o"]), _RoomAssembly())
        shard.parts_total = int(meta["pn"])
        shard.parts_seen.add(int(meta["p"]))
        shard.items.update(items)
        expected = range(len(task.reducer_nodes))
        if all(o in task.shards and task.shards[o].complete() for o in expected):
            return self._commit_cycle(now, task)
        return []

    def _commit_cycle(self, now: int, task: _MasterTask) -> list[Send]:
        reduced: dict[CompositeKey, int] = {}
        for shard in task.shards.values():
            for key_text, count in shard.items.items():
                reduced[parse_composite_key(key_text)] = count
        case1 = mapreduce.aggregate_case1(reduced)
        case2 = mapreduce.aggregate_case2(reduced)
        # Participant rooms with zero sightings still appear, as zero rows.
        for room in task.participants:
            if room not in case2.per_room_totals:
                case2.per_room_totals[room] = 0
                case2.per_room_breakdown[room] = {cat: 0 for cat in case1.per_category_totals}
        report = CycleReport(
            cycle_index=task.cycle,
            term=self.role_state.term,
            master=self.node_id,
            case1=case1,
            case2=case2,
            events_processed=case1.total(),
            wall_events=self.digest_fn(),
        )
        self.outbox_commits.append(report)
        self.commit_meta[task.cycle] = (task.attempt, task.participants)
        self._advance_committed(task.cycle)
        self.master_task = None
        payload = {
            "c": str(task.cycle),
            "a": str(task.attempt),
            "rooms": _join_ids(task.participants),
        }
        sends = [self._emit(BROADCAST, MsgType.CYCLE_DONE, payload)]
        sends.extend(self._drive_cycle(now))  # catch up immediately when behind
        return sends

    def _on_cycle_done(self, now: int, msg: Message) -> list[Send]:
        cycle = int(msg.payload["c"])
        attempt = int(msg.payload["a"])
        rooms = _split_ids(msg.payload.get("rooms", ""))
        self.commit_meta.setdefault(cycle, (attempt, rooms))
        self._advance_committed(cycle)
        return []

    def _advance_committed(self, cycle: int) -> None:
        if cycle > self.committed_cycle:
            self.committed_cycle = cycle
        for snap_cycle in list(self.snapshots):
            meta = self.commit_meta.get(snap_cycle)
            if meta is None:
                continue
            _, rooms = meta
            snapshot = self.snapshots.pop(snap_cycle)
            self.snapshot_items.pop(snap_cycle, None)
            self.map_tasks.pop(snap_cycle, None)
            self.last_map_send.pop(snap_cycle, None)
            if self.room is not None and self.room in rooms:
                gone = {ev.event_id for ev in snapshot}
                self.buffer = [ev for ev in self.buffer if ev.event_id not in gone]
            # else: not part of that commit -- events stay buffered for later.
        for key in [k for k in self.red_slots if k[0] <= self.committed_cycle]:
            del self.red_slots[key]
        if self.master_task is not None and self.master_task.cycle <= self.committed_cycle:
            self.master_task = None
