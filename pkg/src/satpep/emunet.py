"""Deterministic discrete-event network core.

Four nodes form a fixed chain::

    client -- proxy_st -- proxy_gw -- server
          LAN          SAT          NET

Each adjacent pair is joined by one directed link per direction.  A link
applies, in order: drop-tail queueing against a byte-serialization rate,
an independent random-loss draw, and a piecewise-constant propagation
delay.  All timestamps are integer microseconds.  Events that share a
timestamp are processed in insertion order, and every random draw comes
from a single seeded generator consumed in event order, so two runs with
the same configuration and seed replay identically.
"""

from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

from .eventlog import EventLog

US_PER_S = 1_000_000
US_PER_MS = 1_000

CHAIN = ("client", "proxy_st", "proxy_gw", "server")

DROP_QUEUE_OVERFLOW = "queue_overflow"
DROP_RANDOM_LOSS = "random_loss"


class SimulationError(RuntimeError):
    """An event handler failed; the message carries the event context."""


def serialization_us(size_bytes: int, rate_bps: int) -> int:
    """Time to clock ``size_bytes`` onto a link, 0 when the rate is uncapped."""
    if rate_bps <= 0:
        return 0
    return (size_bytes * 8 * US_PER_S + rate_bps - 1) // rate_bps


@dataclass(frozen=True, slots=True)
class Delivered:
    arrival_us: int


@dataclass(frozen=True, slots=True)
class Dropped:
    reason: str


@dataclass
class LinkSpec:
    """Static description of one link direction.

    ``delay_schedule_ms`` is a piecewise-constant schedule of
    ``(start_time_s, one_way_delay_ms)`` pairs; the first entry must start
    at t=0 and start times must strictly increase.  ``rate_bps`` of 0
    means no serialization or queueing.

    ``loss_burst_pkts`` groups consecutive packets into link-layer frame
    units that share one loss draw: each unit is dropped with probability
    ``loss_prob``, so the marginal per-packet loss rate stays ``loss_prob``
    while losses arrive in frame-sized bursts.  The default of 1 keeps
    draws independent per packet.
    """

    name: str
    delay_schedule_ms: Sequence[tuple[float, float]] = ((0.0, 0.0),)
    loss_prob: float = 0.0
    rate_bps: int = 0
    queue_capacity_pkts: int = 1_000_000
    loss_burst_pkts: int = 1

    def __post_init__(self):
        sched = list(self.delay_schedule_ms)
        if not sched:
            raise ValueError(f"{self.name}: delay schedule must be non-empty")
        if sched[0][0] != 0:
            raise ValueError(f"{self.name}: delay schedule must start at t=0")
        for (a, da), (b, _) in zip(sched, sched[1:]):
            if b <= a:
                raise ValueError(f"{self.name}: schedule start times must strictly increase")
        if any(d < 0 for _, d in sched):
            raise ValueError(f"{self.name}: delays must be >= 0")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError(f"{self.name}: loss_prob must be in [0, 1]")
        if self.queue_capacity_pkts < 1:
            raise ValueError(f"{self.name}: queue_capacity_pkts must be >= 1")
        if self.rate_bps < 0:
            raise ValueError(f"{self.name}: rate_bps must be >= 0")
        if self.loss_burst_pkts < 1:
            raise ValueError(f"{self.name}: loss_burst_pkts must be >= 1")
        self._sched_us = [(int(round(s * US_PER_S)), int(round(d * US_PER_MS))) for s, d in sched]

    def delay_us_at(self, t_us: int) -> int:
        for start, d in reversed(self._sched_us):
            if start <= t_us:
                return d
        return self._sched_us[0][1]

    def delay_ms_at(self, t_s: float) -> float:
        return self.delay_us_at(int(round(t_s * US_PER_S))) / US_PER_MS


@dataclass(slots=True)
class Packet:
    pid: int
    src: str
    dst: str
    size_bytes: int
    conn_id: int
    frame: object


class Link:
    """Runtime state of one link direction: serializer, queue, counters."""

    __slots__ = (
        "spec",
        "src",
        "dst",
        "busy_until_us",
        "_queue_ends",
        "_frame_left",
        "_frame_drop",
        "offered",
        "delivered",
        "delivered_bytes",
        "dropped_loss",
        "dropped_overflow",
    )

    def __init__(self, spec: LinkSpec, src: str, dst: str):
        self.spec = spec
        self.src = src
        self.dst = dst
        self.busy_until_us = 0
        self._queue_ends: deque[int] = deque()  # serialization-end times of queued packets
        self._frame_left = 0
        self._frame_drop = False
        self.offered = 0
        self.delivered = 0
        self.delivered_bytes = 0
        self.dropped_loss = 0
        self.dropped_overflow = 0

    def _loss_draw(self, rng: random.Random) -> bool:
        spec = self.spec
        if spec.loss_prob <= 0.0:
            return False
        if spec.loss_burst_pkts == 1:
            return rng.random() < spec.loss_prob
        if self._frame_left == 0:
            self._frame_left = spec.loss_burst_pkts
            self._frame_drop = rng.random() < spec.loss_prob
        self._frame_left -= 1
        return self._frame_drop

    def enqueue(self, rng: random.Random, pkt: Packet, now_us: int) -> Delivered | Dropped:
        self.offered += 1
        q = self._queue_ends
        while q and q[0] <= now_us:
            q.popleft()
        if len(q) >= self.spec.queue_capacity_pkts:
            self.dropped_overflow += 1
            return Dropped(DROP_QUEUE_OVERFLOW)
        if self._loss_draw(rng):
            self.dropped_loss += 1
            return Dropped(DROP_RANDOM_LOSS)
        ser = serialization_us(pkt.size_bytes, self.spec.rate_bps)
        start = self.busy_until_us if self.busy_until_us > now_us else now_us
        end = start + ser
        self.busy_until_us = end
        if ser:
            q.append(end)
        self.delivered += 1
        self.delivered_bytes += pkt.size_bytes
        return Delivered(end + self.spec.delay_us_at(now_us))


class Node:
    __slots__ = ("name", "connections", "listener")

    def __init__(self, name: str):
        self.name = name
        self.connections: dict[int, object] = {}
        self.listener: object | None = None


class EmuNet:
    """Event queue, clock, nodes, and links of one simulation instance.

    An instance is single-threaded and must not be shared across threads
    mid-run; independent instances may run concurrently.
    """

    def __init__(
        self,
        link_specs: dict[tuple[str, str], LinkSpec],
        seed: int = 0,
        log: EventLog | None = None,
        max_datagram_bytes: int = 1500,
    ):
        self.now_us = 0
        self.rng = random.Random(seed)
        self.seed = seed
        self.log = log if log is not None else EventLog()
        self.max_datagram_bytes = max_datagram_bytes
        self.nodes = {name: Node(name) for name in CHAIN}
        self.links: dict[tuple[str, str], Link] = {}
        for a, b in zip(CHAIN, CHAIN[1:]):
            for src, dst in ((a, b), (b, a)):
                spec = link_specs.get((src, dst))
                if spec is None:
                    raise ValueError(f"missing link spec for {src}->{dst}")
                self.links[(src, dst)] = Link(spec, src, dst)
        self._heap: list[tuple[int, int, list]] = []
        self._seq = 0
        self._next_pid = 0
        self._next_cid = 1
        self._hop = {name: i for i, name in enumerate(CHAIN)}

    # -- scheduling ----------------------------------------------------

    def schedule(self, t_us: int, fn: Callable[[], None]) -> list:
        """Schedule ``fn`` at ``t_us``; returns a cancellable handle."""
        entry = [fn]
        self._seq += 1
        heapq.heappush(self._heap, (t_us, self._seq, entry))
        return entry

    @staticmethod
    def cancel(handle: list | None) -> None:
        if handle is not None:
            handle[0] = None

    def run_until(self, t_end_us: int) -> int:
        """Process all events with time <= t_end_us; clock ends at t_end_us."""
        if t_end_us < self.now_us:
            raise ValueError("run_until target precedes current time")
        processed = 0
        heap = self._heap
        while heap and heap[0][0] <= t_end_us:
            t, _, entry = heapq.heappop(heap)
            fn = entry[0]
            if fn is None:
                continue
            self.now_us = t
            try:
                fn()
            except Exception as exc:  # surface the failing event's context
                raise SimulationError(f"event handler failed at t={t}us: {exc!r}") from exc
            processed += 1
        self.now_us = t_end_us
        return processed

    # -- identifiers ---------------------------------------------------

    def next_conn_id(self) -> int:
        cid = self._next_cid
        self._next_cid += 1
        return cid

    def make_packet(self, src: str, dst: str, size_bytes: int, conn_id: int, frame) -> Packet:
        if not 0 < size_bytes <= self.max_datagram_bytes:
            raise ValueError(f"packet size {size_bytes} outside (0, {self.max_datagram_bytes}]")
        pid = self._next_pid
        self._next_pid += 1
        return Packet(pid, src, dst, size_bytes, conn_id, frame)

    # -- forwarding ----------------------------------------------------

    def send_from(self, node_name: str, pkt: Packet) -> Delivered | Dropped:
        """Enqueue ``pkt`` on the next hop from ``node_name`` toward its dst."""
        here = self._hop[node_name]
        there = self._hop[pkt.dst]
        if here == there:
            raise ValueError(f"packet for {pkt.dst} already at {node_name}")
        nxt = CHAIN[here + 1] if there > here else CHAIN[here - 1]
        link = self.links[(node_name, nxt)]
        outcome = link.enqueue(self.rng, pkt, self.now_us)
        if isinstance(outcome, Delivered):
            self.schedule(outcome.arrival_us, lambda: self._arrive(nxt, pkt))
        else:
            self.log.emit(
                self.now_us,
                "net",
                "packet_dropped",
                link=link.spec.name,
                reason=outcome.reason,
                pid=pkt.pid,
                conn=pkt.conn_id,
            )
        return outcome

    def _arrive(self, node_name: str, pkt: Packet) -> None:
        if node_name != pkt.dst:
            self.send_from(node_name, pkt)
            return
        node = self.nodes[node_name]
        conn = node.connections.get(pkt.conn_id)
        if conn is not None:
            conn.receive(pkt)
        elif node.listener is not None:
            node.listener.on_packet(pkt)
        else:
            self.log.emit(self.now_us, "net", "packet_orphaned", node=node_name, pid=pkt.pid)

    def path_rtt_us(self, a: str = "client", b: str = "server") -> int:
        """Propagation round trip between two chain nodes at t=0 (no serialization)."""
        lo, hi = sorted((self._hop[a], self._hop[b]))
        total = 0
        for i in range(lo, hi):
            total += self.links[(CHAIN[i], CHAIN[i + 1])].spec.delay_us_at(0)
            total += self.links[(CHAIN[i + 1], CHAIN[i])].spec.delay_us_at(0)
        return total
