"""Live transport: the same node logic over real UDP sockets on localhost.

One selectors-based loop hosts every node in-process; only the transport
and the clock differ from sim mode -- the frames on the wire are identical.
Intended for demos and smoke tests, not for acceptance runs (real clocks
and real sockets are not deterministic).
"""

from __future__ import annotations

import selectors
import socket
import time

from .domain import VisitorEvent
from .membership import ClusterConfig
from .node import BROADCAST, NodeProcess
from .reporting import CycleReport


def _now_ms(origin: float) -> int:
    return int((time.monotonic() - origin) * 1000)


class LiveCluster:
    """Run a whole cluster over loopback UDP until a wall-clock deadline."""

    def __init__(self, cluster: ClusterConfig, *, rooms: int, reducer_count: int = 3,
                 scenario_id: str = "live"):
        self.cluster = cluster
        self.nodes: dict[int, NodeProcess] = {}
        self.sockets: dict[int, socket.socket] = {}
        self.selector = selectors.DefaultSelector()
        self.reports: list[CycleReport] = []
        self._origin = time.monotonic()
        self._stats = {"sent": 0, "data": 0}
        for node_id, (host, port) in cluster.endpoints.items():
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.bind((host, port))
            sock.setblocking(False)
            self.sockets[node_id] = sock
            self.selector.register(sock, selectors.EVENT_READ, node_id)
            node = NodeProcess(
                node_id, cluster, rooms=rooms, reducer_count=reducer_count,
                scenario_id=scenario_id,
            )
            node.digest_fn = lambda: dict(messages=self._stats["sent"],
                                          data_messages=self._stats["data"])
            self.nodes[node_id] = node

    def close(self) -> None:
        for sock in self.sockets.values():
            self.selector.unregister(sock)
            sock.close()

    def _dispatch(self, src: int, sends: list[tuple[int, bytes]]) -> None:
        for dst, data in sends:
            targets = (
                [n for n in self.cluster.endpoints if n != src] if dst == BROADCAST else [dst]
            )
            for target in targets:
                self._stats["sent"] += 1
                if data.split(b" ", 2)[1] in (b"TASK", b"MAP_OUT", b"RED_OUT", b"CYCLE_DONE"):
                    self._stats["data"] += 1
                try:
                    self.sockets[src].sendto(data, self.cluster.endpoints[target])
                except OSError:
                    pass  # lossy transport by definition

    def inject(self, event: VisitorEvent) -> None:
        node = self.nodes.get(event.room)
        if node is not None:
            node.absorb_visitor(_now_ms(self._origin), event)

    def run(self, wall_seconds: float, events: list[VisitorEvent] = ()) -> list[CycleReport]:
        """Drive ticks/sockets until the deadline; events fire at their timestamps."""
        deadline = time.monotonic() + wall_seconds
        pending = sorted(events, key=lambda ev: ev.timestamp)
        next_tick = {node_id: 0 for node_id in self.nodes}
        started = False
        while time.monotonic() < deadline:
            now = _now_ms(self._origin)
            if not started:
                for node_id, node in self.nodes.items():
                    self._dispatch(node_id, node.on_start(now))
                started = True
            while pending and pending[0].timestamp <= now:
                self.inject(pending.pop(0))
            for node_id, node in self.nodes.items():
                if now >= next_tick[node_id]:
                    self._dispatch(node_id, node.on_tick(now))
                    next_tick[node_id] = now + self.cluster.heartbeat_period
            for key, _ in self.selector.select(timeout=0.01):
                node_id = key.data
                sock = self.sockets[node_id]
                try:
                    while True:
                        data, _ = sock.recvfrom(2048)
                        self._dispatch(node_id, self.nodes[node_id].on_datagram(
                            _now_ms(self._origin), data))
                except BlockingIOError:
                    pass
            for node in self.nodes.values():
                if node.outbox_commits:
                    self.reports.extend(node.outbox_commits)
                    node.outbox_commits.clear()
        return self.reports
