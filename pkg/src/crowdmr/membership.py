"""Failure detection, connectivity accounting, leader eligibility, and role exchange.

A node is eligible to become or remain master only while its degree of
connectivity (live peers heard within the heartbeat timeout, plus itself)
is at least ceil(2N/3).  Leadership tenures are numbered by a term that
only ever increases at any node; the term plus a claim/ack quorum is what
makes role exchange safe over a lossy datagram transport.

step_role is a pure transition function; each node runtime owns one
RoleState and feeds it events from its single logical event loop.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Union

from .domain import NodeId


class SelfHeartbeat(ValueError):
    """A node tried to record a heartbeat from itself."""


@dataclass(frozen=True)
class ClusterConfig:
    """Static cluster facts fixed at first execution.

    All durations are simulated milliseconds.  Constraints:
    heartbeat_timeout > heartbeat_period and cycle_period > heartbeat_timeout.
    """

    node_count: int
    endpoints: dict[NodeId, tuple[str, int]]
    initial_master: NodeId
    heartbeat_period: int = 1_000
    heartbeat_timeout: int = 5_000
    connectivity_check_period: int = 60_000
    cycle_period: int = 300_000

    def __post_init__(self) -> None:
        if self.node_count != len(self.endpoints):
            raise ValueError("node_count must equal the number of endpoints")
        if self.initial_master not in self.endpoints:
            raise ValueError(f"initial master {self.initial_master} has no endpoint")
        if not self.heartbeat_timeout > self.heartbeat_period > 0:
            raise ValueError("require heartbeat_timeout > heartbeat_period > 0")
        if not self.cycle_period > self.heartbeat_timeout:
            raise ValueError("require cycle_period > heartbeat_timeout")

    @property
    def node_ids(self) -> list[NodeId]:
        return sorted(self.endpoints)


def default_endpoints(node_count: int, base_port: int = 47000) -> dict[NodeId, tuple[str, int]]:
    return {i: ("127.0.0.1", base_port + i) for i in range(node_count)}


@dataclass(frozen=True)
class ConnectivityView:
    """One node's freshness matrix: when each peer was last heard from.

    A peer is live iff now - last_heard[peer] <= timeout; the observer
    always counts itself live.
    """

    observer: NodeId
    last_heard: Mapping[NodeId, int]
    now: int
    timeout: int


def record_heartbeat(view: ConnectivityView, peer: NodeId, at: int) -> ConnectivityView:
    """Return a view with peer's freshness advanced to max(existing, at)."""
    if peer == view.observer:
        raise SelfHeartbeat(f"node {peer} cannot heartbeat itself")
    heard = dict(view.last_heard)
    heard[peer] = max(heard.get(peer, at), at)
    return replace(view, last_heard=heard)


def degree(view: ConnectivityView) -> int:
    """Number of live nodes including the observer."""
    live = sum(
        1
        for peer, at in view.last_heard.items()
        if peer != view.observer and view.now - at <= view.timeout
    )
    return live + 1


def eligibility_threshold(node_count: int) -> int:
    """ceil(2 * node_count / 3): the minimum degree to become or remain master."""
    return (2 * node_count + 2) // 3


def is_eligible(view: ConnectivityView, node_count: int) -> bool:
    return degree(view) >= eligibility_threshold(node_count)


def select_leader(
    candidates: set[tuple[NodeId, int]],
    current_leader: NodeId | None,
    node_count: int,
) -> NodeId | None:
    """Pick a leader from (node, claimed degree) pairs.

    Only candidates meeting the two-thirds threshold qualify; the incumbent
    retains its status whenever it qualifies, otherwise the lowest eligible
    node id wins.  Returns None when nobody qualifies.
    """
    need = eligibility_threshold(node_count)
    eligible = {node for node, deg in candidates if deg >= need}
    if not eligible:
        return None
    if current_leader in eligible:
        return current_leader
    return min(eligible)


class Role(enum.Enum):
    MASTER = "M"
    WORKER = "W"
    CANDIDATE = "C"


@dataclass(frozen=True)
class RoleState:
    node: NodeId
    role: Role
    term: int
    known_master: NodeId | None


# --- events fed into step_role ------------------------------------------------


@dataclass(frozen=True)
class HeartbeatTimeoutOnMaster:
    """The master has been silent past the heartbeat timeout."""

    degree: int
    node_count: int


@dataclass(frozen=True)
class LeaderClaimReceived:
    term: int
    claimant: NodeId
    degree: int


@dataclass(frozen=True)
class LeaderAckQuorum:
    """Acks from >= ceil(2N/3) nodes (including self) arrived for our claim term."""

    term: int


@dataclass(frozen=True)
class HigherTermObserved:
    """A leadership observation at a term >= ours from another node.

    leader carries the announced/heartbeating master when the observation
    identifies one, else None (e.g. a bare claim).
    """

    term: int
    leader: NodeId | None = None


@dataclass(frozen=True)
class ConnectivityCheckDue:
    degree: int
    node_count: int


RoleEvent = Union[
    HeartbeatTimeoutOnMaster,
    LeaderClaimReceived,
    LeaderAckQuorum,
    HigherTermObserved,
    ConnectivityCheckDue,
]


# --- actions emitted by step_role ---------------------------------------------


@dataclass(frozen=True)
class BroadcastClaim:
    term: int
    degree: int


@dataclass(frozen=True)
class BroadcastAnnounce:
    term: int


@dataclass(frozen=True)
class BroadcastAbdicate:
    term: int


@dataclass(frozen=True)
class SendLeaderAck:
    to: NodeId
    term: int


Action = Union[BroadcastClaim, BroadcastAnnounce, BroadcastAbdicate, SendLeaderAck]


def step_role(state: RoleState, event: RoleEvent) -> tuple[RoleState, list[Action]]:
    """Deterministic role transition. Stale events (term below ours) are ignored.

    Safety note: a claim is acknowledged only when it carries a strictly
    higher term, and acknowledging adopts that term -- so each node acks at
    most one claimant per term, and two ack quorums (each >= ceil(2N/3) >
    N/2) cannot form for the same term.
    """
    if isinstance(event, HeartbeatTimeoutOnMaster):
        # Candidates re-enter here when their claim round stalls (split vote
        # or lost acks) and the master is still silent.
        if state.role in (Role.WORKER, Role.CANDIDATE) and event.degree >= eligibility_threshold(
            event.node_count
        ):
            new_term = state.term + 1
            new = RoleState(state.node, Role.CANDIDATE, new_term, None)
            return new, [BroadcastClaim(new_term, event.degree)]
        return state, []

    if isinstance(event, LeaderClaimReceived):
        if event.term > state.term:
            new = RoleState(state.node, Role.WORKER, event.term, None)
            return new, [SendLeaderAck(event.claimant, event.term)]
        return state, []

    if isinstance(event, LeaderAckQuorum):
        if state.role is Role.CANDIDATE and event.term == state.term:
            new = RoleState(state.node, Role.MASTER, state.term, state.node)
            return new, [BroadcastAnnounce(state.term)]
        return state, []

    if isinstance(event, HigherTermObserved):
        if event.term > state.term:
            return RoleState(state.node, Role.WORKER, event.term, event.leader), []
        if (
            event.term == state.term
            and event.leader is not None
            and event.leader != state.node
            and state.role is not Role.MASTER
        ):
            # Same-term master identity (announce or master heartbeat we missed).
            return RoleState(state.node, Role.WORKER, event.term, event.leader), []
        return state, []

    if isinstance(event, ConnectivityCheckDue):
        if state.role is Role.MASTER and event.degree < eligibility_threshold(event.node_count):
            new = RoleState(state.node, Role.WORKER, state.term, None)
            return new, [BroadcastAbdicate(state.term)]
        return state, []

    raise TypeError(f"unknown role event: {event!r}")
