"""Reliable stream transports running over the emulated network.

Two profiles share one engine:

* ``quic``: handshake costs a single round trip, many concurrent streams,
  packet-number acknowledgment ranges, packet-threshold and time-threshold
  loss detection with probe timeouts, configurable ack frequency.
* ``tcp``: three-way handshake plus a configurable number of security
  round trips, exactly one stream, cumulative acknowledgments, duplicate-ack
  fast retransmit with partial-ack hole repair, and a classic RTO.

Application payload is synthetic: streams carry byte counts plus optional
string tags that mark message boundaries, never real buffers.  A connection
endpoint may advertise a receive-credit window (``recv_window``); senders
never let un-consumed stream bytes exceed that credit, which is how relays
apply back-pressure to a faster upstream leg.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .congestion import Controller, make_controller
from .emunet import EmuNet, Packet, US_PER_MS, US_PER_S
from .eventlog import EventLog

QUIC = "quic"
TCP = "tcp"

CONTROL_STREAM_ID = 3  # server-initiated stream carrying the web control preamble

HANDSHAKE_BYTES = {
    "ch": 1200,
    "sh": 1200,
    "done": 60,
    "syn": 80,
    "synack": 80,
    "ack": 60,
    "tls_c": 300,
    "tls_s": 300,
}
ACK_BYTES = 60
CREDIT_BYTES = 60
CLOSE_BYTES = 60

HS_TIMEOUT_US = 10 * US_PER_S
HS_RETRY_BASE_US = 1 * US_PER_S
INITIAL_PTO_US = 1 * US_PER_S
MIN_PTO_US = 10 * US_PER_MS
MIN_RTO_US = 200 * US_PER_MS
PKT_REORDER_THRESHOLD = 3
TIME_THRESHOLD_NUM, TIME_THRESHOLD_DEN = 9, 8
DUPACK_THRESHOLD = 3
MAX_ACK_RANGES = 8
STALE_GAP_PNS = 64  # receiver forgets holes this far below the largest seen


class UnknownStream(ValueError):
    pass


class SendAfterFin(ValueError):
    pass


class AckOfUnsentPacket(RuntimeError):
    pass


@dataclass
class AckFrequencyConfig:
    ack_eliciting_threshold: int = 2
    max_ack_delay_ms: float = 25.0

    def __post_init__(self):
        if self.ack_eliciting_threshold < 1:
            raise ValueError("ack_eliciting_threshold must be >= 1")
        if self.max_ack_delay_ms < 0:
            raise ValueError("max_ack_delay_ms must be >= 0")


@dataclass
class TransportProfile:
    kind: str = QUIC
    tls_rtts: int = 0
    max_payload_bytes: int = 1200
    ack_frequency: AckFrequencyConfig = field(default_factory=AckFrequencyConfig)

    def __post_init__(self):
        if self.kind not in (QUIC, TCP):
            raise ValueError(f"unknown transport kind {self.kind!r}")
        if self.kind == QUIC and self.tls_rtts != 0:
            raise ValueError("quic integrates security; tls_rtts must be 0")
        if self.tls_rtts not in (0, 1, 2):
            raise ValueError("tls_rtts must be 0, 1 or 2")
        if self.max_payload_bytes < 256:
            raise ValueError("max_payload_bytes must be >= 256")


# -- wire frames -------------------------------------------------------


@dataclass(slots=True)
class HandshakeFrame:
    kind: str
    tls_idx: int = 0
    pn: int = -1  # only the quic handshake-done flight carries a packet number


@dataclass(slots=True)
class DataFrame:
    stream_id: int
    offset: int
    length: int
    fin: bool
    tag: str | None
    pn: int


@dataclass(slots=True)
class QuicAckFrame:
    floor_pn: int
    ranges: tuple
    ack_delay_us: int
    max_data: int | None


@dataclass(slots=True)
class TcpAckFrame:
    cum_offset: int
    sack: tuple  # out-of-order [lo, hi) byte ranges above cum_offset, newest last
    max_data: int | None


@dataclass(slots=True)
class CreditFrame:
    max_data: int


@dataclass(slots=True)
class CloseFrame:
    reason: str


@dataclass(slots=True)
class SentRecord:
    pn: int
    stream_id: int | None  # None marks the handshake-done flight
    offset: int
    length: int
    fin: bool
    tag: str | None
    sent_us: int
    is_retx: bool


class RttEstimator:
    __slots__ = ("srtt_us", "rttvar_us", "min_rtt_us")

    def __init__(self):
        self.srtt_us: float | None = None
        self.rttvar_us = 0.0
        self.min_rtt_us = float("inf")

    def sample(self, rtt_us: float) -> None:
        rtt_us = max(rtt_us, 1.0)
        self.min_rtt_us = min(self.min_rtt_us, rtt_us)
        if self.srtt_us is None:
            self.srtt_us = rtt_us
            self.rttvar_us = rtt_us / 2.0
        else:
            self.rttvar_us = 0.75 * self.rttvar_us + 0.25 * abs(self.srtt_us - rtt_us)
            self.srtt_us = 0.875 * self.srtt_us + 0.125 * rtt_us


class StreamState:
    """Per-stream send queue and receive reassembly for one endpoint."""

    __slots__ = (
        "stream_id",
        "send_offset",
        "sent_offset",
        "fin_offset",
        "unbounded",
        "_out",
        "recv_ranges",
        "recv_in_order",
        "recv_fin_offset",
        "fin_delivered",
        "_tags",
        "ready",
        "ready_bytes",
    )

    def __init__(self, stream_id: int):
        self.stream_id = stream_id
        self.send_offset = 0  # bytes appended by the application
        self.sent_offset = 0  # bytes handed to packets at least once
        self.fin_offset: int | None = None
        self.unbounded = False
        self._out: deque[list] = deque()  # [remaining, tag]; tag rides the first byte
        self.recv_ranges: list[list[int]] = []  # merged [start, end) byte ranges
        self.recv_in_order = 0
        self.recv_fin_offset: int | None = None
        self.fin_delivered = False
        self._tags: dict[int, str] = {}
        self.ready: deque[tuple[int, str | None, bool]] = deque()  # (length, tag, fin)
        self.ready_bytes = 0

    def _push_ready(self, length: int, tag: str | None, fin: bool) -> None:
        self.ready_bytes += length
        if tag is None and self.ready:
            last = self.ready[-1]
            if not last[2]:  # coalesce into an unfinished untagged tail
                self.ready[-1] = (last[0] + length, last[1], fin)
                return
        self.ready.append((length, tag, fin))

    # send side

    def append(self, nbytes: int, tag: str | None, fin: bool) -> None:
        if self.fin_offset is not None:
            raise SendAfterFin(f"stream {self.stream_id} already finished")
        self._out.append([nbytes, tag])
        self.send_offset += nbytes
        if fin:
            self.fin_offset = self.send_offset

    @property
    def pending_bytes(self) -> int:
        return self.send_offset - self.sent_offset

    def has_pending(self) -> bool:
        return self.unbounded or self.sent_offset < self.send_offset

    def next_slice(self, budget: int) -> tuple[int, int, bool, str | None] | None:
        if self._out:
            head = self._out[0]
            n = head[0] if head[0] < budget else budget
            tag = head[1]
            head[1] = None
            head[0] -= n
            if head[0] == 0:
                self._out.popleft()
            offset = self.sent_offset
            self.sent_offset += n
            fin = self.fin_offset == self.sent_offset
            return offset, n, fin, tag
        if self.unbounded:
            offset = self.sent_offset
            self.send_offset += budget
            self.sent_offset += budget
            return offset, budget, False, None
        return None

    # receive side

    def add_segment(self, offset: int, length: int, tag: str | None, fin: bool) -> tuple[bool, int]:
        """Merge one arriving segment.

        Returns (in-order data advanced, newly covered byte count); the
        latter deduplicates retransmitted copies.
        """
        if tag is not None and offset >= self.recv_in_order:
            self._tags[offset] = tag
        if fin:
            self.recv_fin_offset = offset + length
        before = sum(r[1] - r[0] for r in self.recv_ranges)
        self._insert_range(offset, offset + length)
        new_bytes = sum(r[1] - r[0] for r in self.recv_ranges) - before
        first = self.recv_ranges[0]
        if first[0] > 0 or first[1] <= self.recv_in_order:
            return self._maybe_ready_fin(), new_bytes
        old = self.recv_in_order
        new = first[1]
        self.recv_in_order = new
        # split the newly in-order span at message-boundary tags
        cuts = sorted(o for o in self._tags if old < o < new)
        start = old
        for cut in cuts + [new]:
            if cut == start:
                continue
            tag_here = self._tags.pop(start, None)
            is_fin = self.recv_fin_offset == cut and cut == new
            self._push_ready(cut - start, tag_here, is_fin)
            if is_fin:
                self.fin_delivered = True
            start = cut
        return True, new_bytes

    def _maybe_ready_fin(self) -> bool:
        # a retransmitted pure-fin marker may complete an already-drained stream
        if (
            self.recv_fin_offset is not None
            and self.recv_fin_offset == self.recv_in_order
            and not self.fin_delivered
            and not self.ready
        ):
            self.fin_delivered = True
            self.ready.append((0, None, True))
            return True
        return False

    def take_ready(self, max_bytes: float) -> list[tuple[int, str | None, bool]]:
        """Pop up to ``max_bytes`` of in-order segments, splitting the last if needed."""
        taken: list[tuple[int, str | None, bool]] = []
        budget = max_bytes
        while self.ready and budget > 0:
            length, tag, fin = self.ready[0]
            if length <= budget:
                self.ready.popleft()
                taken.append((length, tag, fin))
                budget -= length
                self.ready_bytes -= length
            else:
                take = int(budget)
                if take == 0:
                    break
                self.ready[0] = (length - take, None, fin)
                taken.append((take, tag, False))
                self.ready_bytes -= take
                budget = 0
        return taken

    def _insert_range(self, lo: int, hi: int) -> None:
        ranges = self.recv_ranges
        if not ranges:
            ranges.append([lo, hi])
            return
        last = ranges[-1]
        if lo >= last[0]:  # common: at or past the newest range
            if lo <= last[1]:
                if hi > last[1]:
                    last[1] = hi
            else:
                ranges.append([lo, hi])
            return
        # retransmission filling an older hole: linear merge
        merged: list[list[int]] = []
        placed = False
        for r in ranges:
            if placed or r[1] < lo:
                merged.append(r)
                continue
            if hi < r[0]:
                merged.append([lo, hi])
                merged.append(r)
                placed = True
                continue
            lo = min(lo, r[0])
            hi = max(hi, r[1])
        if not placed:
            merged.append([lo, hi])
        # coalesce adjacency
        out = [merged[0]]
        for r in merged[1:]:
            if r[0] <= out[-1][1]:
                out[-1][1] = max(out[-1][1], r[1])
            else:
                out.append(r)
        self.recv_ranges = out


def _call(service, name, *args) -> None:
    fn = getattr(service, name, None)
    if fn is not None:
        fn(*args)


class Connection:
    """One endpoint of a reliable stream connection over the emulated net.

    Owned by a single simulation instance; all methods run on that
    instance's event loop.
    """

    def __init__(
        self,
        net: EmuNet,
        node: str,
        peer: str,
        conn_id: int,
        role: str,
        profile: TransportProfile,
        cc: Controller,
        service=None,
        auto_read: bool = True,
        recv_window: int | None = None,
        hold_reply: bool = False,
        early_streams: frozenset[int] = frozenset(),
        label: str = "",
    ):
        self.net = net
        self.node = node
        self.peer = peer
        self.conn_id = conn_id
        self.role = role
        self.profile = profile
        self.cc = cc
        self.service = service
        self.auto_read = auto_read
        self.recv_window = recv_window
        self.hold_reply = hold_reply
        self.early_streams = early_streams
        self.label = label or f"{node}:{conn_id}"
        self.log: EventLog = net.log

        self.state = "idle"  # idle -> connecting -> established | failed
        self.established_at_us: int | None = None
        self.streams: dict[int, StreamState] = {}
        self.rtt = RttEstimator()

        # sender state
        self._pn_next = 0
        self.sent: dict[int, SentRecord] = {}
        self._outstanding: deque[int] = deque()
        self.in_flight_bytes = 0
        self.largest_acked = -1
        self._retx: deque[tuple] = deque()
        self._pending: set[int] = set()
        self._last_sid = -1
        self.unsent_bytes = 0
        self.sent_stream_total = 0
        self.peer_max_data: int | None = None
        self.blocked_on_credit = False
        self.writable_watermark: int | None = None
        self._pto_handle = None
        self._pto_count = 0
        self._rto_handle = None
        self._rto_backoff = 0
        self.snd_una = 0
        self._dupacks = 0
        self._recover_offset: int | None = None
        self._next_sack_scan_us = 0

        # receiver state
        self._recv_pn_ranges: list[list[int]] = []  # closed [lo, hi] packet numbers
        self._recv_largest_pn = -1
        self._recv_largest_at_us = 0
        self._elicited = 0
        self._ack_timer = None
        self.acks_sent = 0
        self.ack_timer_fires = 0
        self.consumed_total = 0
        self._last_advertised = recv_window if recv_window is not None else 0

        # handshake state
        self._reply_sent = False
        self._reply_sent_us: int | None = None
        self._reply_rtt_sampled = False
        self._client_flight: tuple[str, int] | None = None
        self._flight_sent_us = 0
        self._hs_tries = 0
        self._hs_retry = None
        self._hs_deadline = None
        self._tls_progress = 0

        self.bytes_received_total = 0
        net.nodes[node].connections[conn_id] = self

    # -- lifecycle -------------------------------------------------------

    def start_connect(self) -> None:
        now = self.net.now_us
        self.state = "connecting"
        self._hs_deadline = self.net.schedule(now + HS_TIMEOUT_US, self._on_hs_timeout)
        kind = "ch" if self.profile.kind == QUIC else "syn"
        self._send_client_flight(kind, 0)

    def abort(self, reason: str) -> None:
        if self.state == "failed":
            return
        self._send_control(CloseFrame(reason), CLOSE_BYTES)
        self._fail(reason)

    def _fail(self, reason: str) -> None:
        self.state = "failed"
        self._cancel_timers()
        self.log.emit(self.net.now_us, "conn", "connection_failed", conn=self.conn_id, node=self.node, reason=reason)
        _call(self.service, "on_failed", self, reason)

    def _cancel_timers(self) -> None:
        for h in (self._hs_retry, self._hs_deadline, self._pto_handle, self._rto_handle, self._ack_timer):
            EmuNet.cancel(h)
        self._hs_retry = self._hs_deadline = self._pto_handle = self._rto_handle = self._ack_timer = None

    # -- handshake ---------------------------------------------------------

    def _send_client_flight(self, kind: str, tls_idx: int) -> None:
        now = self.net.now_us
        self._client_flight = (kind, tls_idx)
        self._flight_sent_us = now
        self._send_control(HandshakeFrame(kind, tls_idx), HANDSHAKE_BYTES[kind])
        EmuNet.cancel(self._hs_retry)
        delay = HS_RETRY_BASE_US * (2 ** self._hs_tries)
        self._hs_retry = self.net.schedule(now + delay, self._on_hs_retry)

    def _on_hs_retry(self) -> None:
        self._hs_retry = None
        if self.state != "connecting" or self._client_flight is None:
            return
        self._hs_tries += 1
        kind, idx = self._client_flight
        self._send_client_flight(kind, idx)

    def _on_hs_timeout(self) -> None:
        self._hs_deadline = None
        if self.state == "connecting":
            self.log.emit(self.net.now_us, "conn", "handshake_timeout", conn=self.conn_id, node=self.node)
            self._fail("connect_timeout")

    def _touch_hs_deadline(self) -> None:
        if self.state != "connecting" or self._hs_deadline is None:
            return
        EmuNet.cancel(self._hs_deadline)
        self._hs_deadline = self.net.schedule(self.net.now_us + HS_TIMEOUT_US, self._on_hs_timeout)

    def _send_reply(self) -> None:
        now = self.net.now_us
        kind = "sh" if self.profile.kind == QUIC else "synack"
        already = self._reply_sent
        self._reply_sent = True
        if self._reply_sent_us is None:
            self._reply_sent_us = now
        self._send_control(HandshakeFrame(kind), HANDSHAKE_BYTES[kind])
        if not already:
            _call(self.service, "on_reply_sent", self)
            self.transmit()  # early streams may now flow

    def release_reply(self) -> None:
        """Send a withheld handshake reply (sequential proxy orchestration)."""
        if self.role == "server" and not self._reply_sent and self.state == "connecting":
            self.hold_reply = False
            self._send_reply()

    def _complete(self) -> None:
        now = self.net.now_us
        self.state = "established"
        self.established_at_us = now
        self._client_flight = None
        EmuNet.cancel(self._hs_retry)
        EmuNet.cancel(self._hs_deadline)
        self._hs_retry = self._hs_deadline = None
        self.log.emit(now, "conn", "handshake_complete", conn=self.conn_id, node=self.node, role=self.role)
        _call(self.service, "on_established", self)
        self.transmit()

    def _on_handshake(self, frame: HandshakeFrame) -> None:
        now = self.net.now_us
        self._touch_hs_deadline()
        kind = frame.kind
        if self.role == "server":
            if kind in ("ch", "syn"):
                if self.state == "idle":
                    self.state = "connecting"
                if not self.hold_reply:
                    self._send_reply()
            elif kind == "done":
                if frame.pn >= 0:
                    self._note_eliciting_pn(frame.pn)
                    self._ack_decide(True)  # ack at once; nothing else may follow
                if not self._reply_rtt_sampled and self._reply_sent_us is not None:
                    self.rtt.sample(now - self._reply_sent_us)
                    self._reply_rtt_sampled = True
                if self.state != "established":
                    self._complete()
            elif kind == "ack":
                if not self._reply_rtt_sampled and self._reply_sent_us is not None:
                    self.rtt.sample(now - self._reply_sent_us)
                    self._reply_rtt_sampled = True
                if self.profile.tls_rtts == 0 and self.state != "established":
                    self._complete()
            elif kind == "tls_c":
                idx = frame.tls_idx
                if idx <= self._tls_progress + 1:
                    self._tls_progress = max(self._tls_progress, idx)
                    self._send_control(HandshakeFrame("tls_s", idx), HANDSHAKE_BYTES["tls_s"])
                    if idx == self.profile.tls_rtts and self.state != "established":
                        self._complete()
            return
        # client side
        if kind in ("sh", "synack"):
            if self.state != "connecting":
                return
            self.rtt.sample(now - self._flight_sent_us)
            if self.profile.kind == QUIC:
                self._send_done()
                self._complete()
            elif self.profile.tls_rtts == 0:
                self._send_control(HandshakeFrame("ack"), HANDSHAKE_BYTES["ack"])
                self._complete()
            else:
                self._send_control(HandshakeFrame("ack"), HANDSHAKE_BYTES["ack"])
                self._send_client_flight("tls_c", 1)
        elif kind == "tls_s" and self.state == "connecting":
            flight = self._client_flight
            if flight is None or flight[0] != "tls_c" or frame.tls_idx != flight[1]:
                return
            if frame.tls_idx == self.profile.tls_rtts:
                self._complete()
            else:
                self._send_client_flight("tls_c", frame.tls_idx + 1)

    def _send_done(self) -> None:
        # the handshake-completing flight carries a packet number so its loss
        # is repaired by the normal probe machinery
        pn = self._pn_next
        self._pn_next += 1
        rec = SentRecord(pn, None, 0, 0, False, None, self.net.now_us, False)
        self.sent[pn] = rec
        self._outstanding.append(pn)
        self._send_control(HandshakeFrame("done", pn=pn), HANDSHAKE_BYTES["done"])
        self._arm_loss_timer()

    # -- application sending ----------------------------------------------

    def _valid_send_stream(self, stream_id: int) -> bool:
        if self.profile.kind == TCP:
            return stream_id == 0
        if stream_id == CONTROL_STREAM_ID:
            return self.role == "server"
        return stream_id >= 0 and stream_id % 4 == 0

    def send(self, stream_id: int, nbytes: int, fin: bool = False, tag: str | None = None) -> int:
        """Queue ``nbytes`` on a stream; returns the accepted byte count."""
        if not self._valid_send_stream(stream_id):
            raise UnknownStream(f"stream {stream_id} invalid for {self.profile.kind} {self.role}")
        if nbytes < 1:
            raise ValueError("nbytes must be >= 1")
        stream = self.streams.get(stream_id)
        if stream is None:
            stream = self.streams[stream_id] = StreamState(stream_id)
        stream.append(nbytes, tag, fin)
        self.unsent_bytes += nbytes
        self._pending.add(stream_id)
        self.transmit()
        return nbytes

    def open_unbounded(self, stream_id: int) -> None:
        if not self._valid_send_stream(stream_id):
            raise UnknownStream(f"stream {stream_id} invalid for {self.profile.kind} {self.role}")
        stream = self.streams.get(stream_id)
        if stream is None:
            stream = self.streams[stream_id] = StreamState(stream_id)
        if stream.fin_offset is not None:
            raise SendAfterFin(f"stream {stream_id} already finished")
        stream.unbounded = True
        self._pending.add(stream_id)
        self.transmit()

    def _sendable_sids(self) -> list[int]:
        if self.state == "established":
            return sorted(self._pending)
        if self._reply_sent and self.early_streams:
            return sorted(s for s in self._pending if s in self.early_streams)
        return []

    def _next_pending_sid(self) -> int | None:
        sids = self._sendable_sids()
        if not sids:
            return None
        for sid in sids:
            if sid > self._last_sid:
                self._last_sid = sid
                return sid
        self._last_sid = sids[0]
        return sids[0]

    def transmit(self) -> int:
        """Packetize retransmissions then fresh stream data up to cwnd/credit."""
        if self.state == "failed":
            return 0
        can_data = self.state == "established"
        if not can_data and not (self._reply_sent and self.early_streams):
            return 0
        mss = self.profile.max_payload_bytes
        cwnd = self.cc.cwnd
        n_sent = 0
        while self.in_flight_bytes < cwnd:
            if self._retx:
                sid, offset, length, fin, tag = self._retx.popleft()
                if self.profile.kind == TCP and offset + length <= self.snd_una:
                    continue  # acknowledged while queued; resending would never clear
                self._send_payload(sid, offset, length, fin, tag, is_retx=True)
            else:
                if not can_data and not self._pending:
                    break
                sid = self._next_pending_sid()
                if sid is None:
                    self.blocked_on_credit = False
                    break
                stream = self.streams[sid]
                budget = mss
                if self.peer_max_data is not None:
                    room = self.peer_max_data - self.sent_stream_total
                    if room <= 0:
                        self.blocked_on_credit = True
                        break
                    budget = min(budget, room)
                sl = stream.next_slice(budget)
                if sl is None:
                    self._pending.discard(sid)
                    continue
                offset, length, fin, tag = sl
                if not stream.unbounded:
                    self.unsent_bytes -= length
                if not stream.has_pending():
                    self._pending.discard(sid)
                self.sent_stream_total += length
                self._send_payload(sid, offset, length, fin, tag, is_retx=False)
                if fin:
                    _call(self.service, "on_stream_sent", self, sid)
            n_sent += 1
            # the send gate admits at most one max-size packet past cwnd
            assert self.in_flight_bytes < cwnd + mss
        if n_sent:
            self._arm_loss_timer()
        if (
            self.writable_watermark is not None
            and self.unsent_bytes < self.writable_watermark
            and self.service is not None
        ):
            _call(self.service, "on_writable", self)
        return n_sent

    def _send_payload(self, sid, offset, length, fin, tag, is_retx):
        now = self.net.now_us
        if sid is None:  # retransmitted handshake-done flight
            self._send_done()
            return
        pn = self._pn_next
        self._pn_next += 1
        rec = SentRecord(pn, sid, offset, length, fin, tag, now, is_retx)
        self.sent[pn] = rec
        if self.profile.kind == TCP and is_retx:
            # keep the deque offset-ordered so cumulative acks pop from the left
            out = self._outstanding
            idx = 0
            for other in out:
                r = self.sent.get(other)
                if r is not None and r.offset > offset:
                    break
                idx += 1
            out.insert(idx, pn)
        else:
            self._outstanding.append(pn)
        self.in_flight_bytes += length
        frame = DataFrame(sid, offset, length, fin, tag, pn)
        pkt = self.net.make_packet(self.node, self.peer, max(length, 1), self.conn_id, frame)
        self.net.send_from(self.node, pkt)
        if self.log.verbose:
            self.log.emit(now, "transport", "packet_sent", conn=self.conn_id, node=self.node,
                          pn=pn, stream=sid, offset=offset, length=length, fin=fin, retx=is_retx)

    def _send_control(self, frame, size_bytes: int) -> None:
        pkt = self.net.make_packet(self.node, self.peer, size_bytes, self.conn_id, frame)
        self.net.send_from(self.node, pkt)
        if self.log.verbose:
            self.log.emit(self.net.now_us, "transport", "control_sent", conn=self.conn_id,
                          node=self.node, kind=type(frame).__name__)

    # -- receiving ----------------------------------------------------------

    def receive(self, pkt: Packet) -> None:
        if self.state == "failed":
            return
        frame = pkt.frame
        if self.log.verbose:
            self.log.emit(self.net.now_us, "transport", "packet_received", conn=self.conn_id,
                          node=self.node, kind=type(frame).__name__, pid=pkt.pid)
        t = type(frame)
        if t is DataFrame:
            self._imply_server_complete()
            self._on_data(frame)
        elif t is QuicAckFrame:
            self._imply_server_complete()
            self._on_quic_ack(frame)
        elif t is TcpAckFrame:
            self._imply_server_complete()
            self._on_tcp_ack(frame)
        elif t is HandshakeFrame:
            self._on_handshake(frame)
        elif t is CreditFrame:
            self._update_peer_credit(frame.max_data)
            self.transmit()
        elif t is CloseFrame:
            self._fail(frame.reason)

    def _imply_server_complete(self) -> None:
        # any post-handshake traffic proves the peer finished the handshake
        if self.role == "server" and self.state != "established" and self._reply_sent:
            self._complete()

    def _on_data(self, frame: DataFrame) -> None:
        now = self.net.now_us
        sid = frame.stream_id
        stream = self.streams.get(sid)
        if stream is None:
            stream = self.streams[sid] = StreamState(sid)
        if self.profile.kind == QUIC:
            ooo = frame.pn != self._recv_largest_pn + 1
            self._note_eliciting_pn(frame.pn)
        else:
            ooo = frame.offset != stream.recv_in_order
            self._elicited += 1
        advanced, new_bytes = stream.add_segment(frame.offset, frame.length, frame.tag, frame.fin)
        self.bytes_received_total += new_bytes
        if advanced:
            if stream.fin_delivered:
                self.log.emit(now, "transport", "stream_fin", conn=self.conn_id, node=self.node, stream=sid)
            if self.auto_read:
                self._drain_ready(stream)
            else:
                _call(self.service, "on_readable", self, sid)
        self._ack_decide(ooo)

    def _note_eliciting_pn(self, pn: int) -> None:
        if pn > self._recv_largest_pn:
            self._recv_largest_pn = pn
            self._recv_largest_at_us = self.net.now_us
        ranges = self._recv_pn_ranges
        if ranges and ranges[-1][1] + 1 == pn:
            ranges[-1][1] = pn
            self._elicited += 1
            return
        for r in ranges:
            if r[0] <= pn <= r[1]:
                return  # duplicate receipt: no new ack obligation
        ranges.append([pn, pn])
        ranges.sort()
        merged = [ranges[0]]
        for r in ranges[1:]:
            if r[0] <= merged[-1][1] + 1:
                merged[-1][1] = max(merged[-1][1], r[1])
            else:
                merged.append(r)
        self._recv_pn_ranges = merged
        self._elicited += 1

    def _drain_ready(self, stream: StreamState) -> None:
        while stream.ready:
            length, tag, fin = stream.ready.popleft()
            stream.ready_bytes -= length
            self.consumed_total += length
            _call(self.service, "on_stream_data", self, stream.stream_id, length, tag, fin)
        self._maybe_advertise()

    def read_stream(self, stream_id: int, max_bytes: int | None = None) -> list[tuple[int, str | None, bool]]:
        """Pull up to ``max_bytes`` of in-order segments (pull-mode consumers)."""
        stream = self.streams.get(stream_id)
        if stream is None:
            return []
        taken = stream.take_ready(max_bytes if max_bytes is not None else float("inf"))
        if taken:
            self.consumed_total += sum(t[0] for t in taken)
            self._maybe_advertise()
        return taken

    def unread_bytes(self, stream_id: int) -> int:
        stream = self.streams.get(stream_id)
        return stream.ready_bytes if stream else 0

    def _maybe_advertise(self) -> None:
        if self.recv_window is None:
            return
        advert = self.consumed_total + self.recv_window
        if advert - self._last_advertised >= self.recv_window // 4:
            self._last_advertised = advert
            self._send_control(CreditFrame(advert), CREDIT_BYTES)

    def readvertise_credit(self) -> None:
        """Re-announce current credit (recovery from lost credit updates)."""
        if self.recv_window is None:
            return
        advert = self.consumed_total + self.recv_window
        if advert > self._last_advertised:
            self._last_advertised = advert
            self._send_control(CreditFrame(advert), CREDIT_BYTES)

    def _update_peer_credit(self, max_data: int | None) -> None:
        if max_data is None:
            return
        if self.peer_max_data is None or max_data > self.peer_max_data:
            self.peer_max_data = max_data

    # -- acknowledgment generation -------------------------------------------

    def _ack_decide(self, out_of_order: bool) -> None:
        threshold = self.profile.ack_frequency.ack_eliciting_threshold
        if out_of_order or self._elicited >= threshold:
            self._send_ack()
        elif self._ack_timer is None and self._elicited > 0:
            delay = int(self.profile.ack_frequency.max_ack_delay_ms * US_PER_MS)
            self._ack_timer = self.net.schedule(self.net.now_us + delay, self._on_ack_timer)

    def _on_ack_timer(self) -> None:
        self._ack_timer = None
        self.ack_timer_fires += 1
        if self._elicited > 0:
            self._send_ack()

    def _advertised_max_data(self) -> int | None:
        if self.recv_window is None:
            return None
        advert = self.consumed_total + self.recv_window
        self._last_advertised = max(self._last_advertised, advert)
        return advert

    def _send_ack(self) -> None:
        now = self.net.now_us
        EmuNet.cancel(self._ack_timer)
        self._ack_timer = None
        self._elicited = 0
        if self.profile.kind == QUIC:
            ranges = self._recv_pn_ranges
            if not ranges:
                return
            # retransmissions use fresh packet numbers, so old gaps never fill;
            # fuse holes far below the largest pn or acks grow without bound
            # (the sender's own loss threshold resolved those pns long ago)
            while len(ranges) > 1 and ranges[1][0] <= self._recv_largest_pn - STALE_GAP_PNS:
                ranges[1] = [ranges[0][0], ranges[1][1]]
                ranges.pop(0)
            if ranges[0][0] == 0:
                floor = ranges[0][1]
                extra = ranges[1:]
            else:
                floor = -1
                extra = ranges
            extra = tuple(tuple(r) for r in extra[-MAX_ACK_RANGES:])
            frame = QuicAckFrame(floor, extra, now - self._recv_largest_at_us, self._advertised_max_data())
        else:
            s0 = self.streams.get(0)
            sack: tuple = ()
            cum = 0
            if s0 is not None:
                cum = s0.recv_in_order
                above = [r for r in s0.recv_ranges if r[1] > cum]
                sack = tuple(tuple(r) for r in above[-4:])
            frame = TcpAckFrame(cum, sack, self._advertised_max_data())
        self.acks_sent += 1
        if self.log.verbose:
            self.log.emit(now, "transport", "ack_sent", conn=self.conn_id, node=self.node, n=self.acks_sent)
        self._send_control(frame, ACK_BYTES)

    # -- acknowledgment processing ---------------------------------------------

    def _on_quic_ack(self, frame: QuicAckFrame) -> None:
        now = self.net.now_us
        top = frame.floor_pn
        if frame.ranges:
            top = max(top, frame.ranges[-1][1])
        if top >= self._pn_next:
            raise AckOfUnsentPacket(f"{self.label}: ack references unsent packet {top}")
        newly: list[SentRecord] = []
        out = self._outstanding
        while out and out[0] <= frame.floor_pn:
            pn = out.popleft()
            rec = self.sent.pop(pn, None)
            if rec is not None:
                newly.append(rec)
        for lo, hi in frame.ranges:
            lo = max(lo, frame.floor_pn + 1)
            for pn in range(lo, hi + 1):
                rec = self.sent.pop(pn, None)
                if rec is not None:
                    newly.append(rec)
        if newly:
            largest = max(newly, key=lambda r: r.pn)
            if largest.pn > self.largest_acked:
                self.largest_acked = largest.pn
                self.rtt.sample(now - largest.sent_us - frame.ack_delay_us)
            now_s = now / US_PER_S
            for rec in sorted(newly, key=lambda r: r.pn):
                self.in_flight_bytes -= rec.length
                self.cc.on_packet_acked(rec.length, now_s, rec.pn)
            self._pto_count = 0
        self._detect_losses_quic(now)
        self._update_peer_credit(frame.max_data)
        self._arm_loss_timer()
        self.transmit()

    def _detect_losses_quic(self, now: int) -> None:
        if self.largest_acked < 0:
            return
        lost: list[SentRecord] = []
        pn_thresh = self.largest_acked - PKT_REORDER_THRESHOLD
        cutoff = None
        if self.rtt.srtt_us is not None:
            cutoff = now - int(self.rtt.srtt_us * TIME_THRESHOLD_NUM) // TIME_THRESHOLD_DEN
        out = self._outstanding
        while out:
            pn = out[0]
            if pn >= self.largest_acked:
                break
            rec = self.sent.get(pn)
            if rec is None:
                out.popleft()
                continue
            if pn <= pn_thresh or (cutoff is not None and rec.sent_us <= cutoff):
                out.popleft()
                del self.sent[pn]
                self.in_flight_bytes -= rec.length
                lost.append(rec)
            else:
                break
        if not lost:
            return
        for rec in lost:
            self._retx.append((rec.stream_id, rec.offset, rec.length, rec.fin, rec.tag))
            self.log.emit(now, "transport", "packet_lost", conn=self.conn_id, node=self.node,
                          pn=rec.pn, stream=rec.stream_id, offset=rec.offset, length=rec.length)
        applied = self.cc.on_congestion_event(now / US_PER_S, lost[-1].pn, self._pn_next)
        if applied:
            self._log_cwnd("recovery")

    def _on_tcp_ack(self, frame: TcpAckFrame) -> None:
        now = self.net.now_us
        cum = frame.cum_offset
        s0 = self.streams.get(0)
        if s0 is None or cum > s0.sent_offset:
            raise AckOfUnsentPacket(f"{self.label}: cumulative ack {cum} beyond sent data")
        advanced = cum > self.snd_una
        # covered records always leave the ledger, even on duplicate acks,
        # so a late duplicate retransmission cannot pin the loss timer forever
        newly: list[SentRecord] = []
        out = self._outstanding
        while out:
            rec = self.sent.get(out[0])
            if rec is None:
                out.popleft()
                continue
            if rec.offset + rec.length <= cum:
                out.popleft()
                del self.sent[rec.pn]
                self.in_flight_bytes -= rec.length
                newly.append(rec)
            else:
                break
        if advanced:
            self.snd_una = cum
            self._dupacks = 0
            self._rto_backoff = 0
            if newly:
                sample = next((r for r in reversed(newly) if not r.is_retx), None)
                if sample is not None:
                    self.rtt.sample(now - sample.sent_us)
                now_s = now / US_PER_S
                for rec in newly:
                    self.cc.on_packet_acked(rec.length, now_s, rec.pn)
            if self._recover_offset is not None:
                if cum >= self._recover_offset:
                    self._recover_offset = None
                elif not frame.sack:
                    self._tcp_mark_head_lost()  # partial ack: repair next hole
            self._arm_loss_timer()
        elif cum == self.snd_una and self._live_outstanding():
            self._dupacks += 1
            if self._dupacks == DUPACK_THRESHOLD and self._recover_offset is None and not frame.sack:
                lost_pn = self._tcp_mark_head_lost()
                if lost_pn is not None:
                    applied = self.cc.on_congestion_event(now / US_PER_S, lost_pn, self._pn_next)
                    if applied:
                        self._log_cwnd("fast_retransmit")
                    self._recover_offset = s0.sent_offset
        if frame.sack and now >= self._next_sack_scan_us:
            self._tcp_process_sack(frame.sack, cum)
        self._update_peer_credit(frame.max_data)
        if not self._live_outstanding():
            self._arm_loss_timer()  # disarms when nothing is in flight
        self.transmit()

    def _tcp_process_sack(self, sack: tuple, cum: int) -> None:
        """Scoreboard recovery: selectively acked data leaves flight, and a
        segment with three segments' worth of higher data acked is lost.

        Full scans are rate-limited; the added detection latency is far
        below any round trip in play.
        """
        now = self.net.now_us
        if self.rtt.srtt_us is not None:
            self._next_sack_scan_us = now + max(1_000, min(int(self.rtt.srtt_us) // 8, 10_000))
        now_s = now / US_PER_S
        highest = max(hi for _, hi in sack)
        loss_edge = highest - DUPACK_THRESHOLD * self.profile.max_payload_bytes
        sacked: list[SentRecord] = []
        lost: list[SentRecord] = []
        for rec in self.sent.values():
            if rec.offset >= highest:
                continue
            end = rec.offset + rec.length
            if end <= cum or any(lo <= rec.offset and end <= hi for lo, hi in sack):
                sacked.append(rec)
            elif rec.offset <= loss_edge and not rec.is_retx:
                lost.append(rec)
        for rec in sacked:
            del self.sent[rec.pn]
            self.in_flight_bytes -= rec.length
            self.cc.on_packet_acked(rec.length, now_s, rec.pn)
        for rec in lost:
            del self.sent[rec.pn]
            self.in_flight_bytes -= rec.length
            self._retx.append((rec.stream_id, rec.offset, rec.length, rec.fin, rec.tag))
            self.log.emit(now, "transport", "packet_lost", conn=self.conn_id, node=self.node,
                          pn=rec.pn, stream=rec.stream_id, offset=rec.offset, length=rec.length)
        if lost:
            applied = self.cc.on_congestion_event(now_s, max(r.pn for r in lost), self._pn_next)
            if applied:
                self._log_cwnd("fast_retransmit")
            s0 = self.streams.get(0)
            if s0 is not None and self._recover_offset is None:
                self._recover_offset = s0.sent_offset

    def _tcp_mark_head_lost(self) -> int | None:
        out = self._outstanding
        while out:
            rec = self.sent.get(out[0])
            if rec is None:
                out.popleft()
                continue
            out.popleft()
            del self.sent[rec.pn]
            self.in_flight_bytes -= rec.length
            self._retx.appendleft((rec.stream_id, rec.offset, rec.length, rec.fin, rec.tag))
            self.log.emit(self.net.now_us, "transport", "packet_lost", conn=self.conn_id,
                          node=self.node, pn=rec.pn, stream=rec.stream_id,
                          offset=rec.offset, length=rec.length)
            return rec.pn
        return None

    # -- loss timers -------------------------------------------------------

    def _live_outstanding(self) -> bool:
        out = self._outstanding
        while out and out[0] not in self.sent:
            out.popleft()
        return bool(out)

    def _arm_loss_timer(self) -> None:
        # the peer may legitimately sit on an ack for its full delayed-ack
        # budget, so the timeout allows for that on top of srtt + 4*var
        ack_allowance = int(self.profile.ack_frequency.max_ack_delay_ms * US_PER_MS)
        if self.profile.kind == QUIC:
            EmuNet.cancel(self._pto_handle)
            self._pto_handle = None
            if not self._live_outstanding():
                return
            if self.rtt.srtt_us is None:
                base = INITIAL_PTO_US
            else:
                base = max(MIN_PTO_US, int(self.rtt.srtt_us + 4 * self.rtt.rttvar_us)) + ack_allowance
            deadline = self.net.now_us + base * (2 ** self._pto_count)
            self._pto_handle = self.net.schedule(deadline, self._on_pto)
        else:
            EmuNet.cancel(self._rto_handle)
            self._rto_handle = None
            if not self._live_outstanding():
                return
            if self.rtt.srtt_us is None:
                base = INITIAL_PTO_US
            else:
                base = max(MIN_RTO_US, int(self.rtt.srtt_us + 4 * self.rtt.rttvar_us)) + ack_allowance
            deadline = self.net.now_us + base * (2 ** self._rto_backoff)
            self._rto_handle = self.net.schedule(deadline, self._on_rto)

    def _on_pto(self) -> None:
        self._pto_handle = None
        if self.state == "failed" or not self._live_outstanding():
            return
        now = self.net.now_us
        self._pto_count += 1
        rec = self.sent[self._outstanding[0]]
        self.log.emit(now, "transport", "pto_probe", conn=self.conn_id, node=self.node,
                      count=self._pto_count, pn=rec.pn)
        # probe duplicates the oldest unacked payload under a fresh packet number
        if rec.stream_id is None:
            self._send_done()
        else:
            self._send_payload(rec.stream_id, rec.offset, rec.length, rec.fin, rec.tag, is_retx=True)
        if self._pto_count == 2:
            self.cc.on_timeout(now / US_PER_S, self._pn_next)
            self._log_cwnd("timeout")
        self._arm_loss_timer()

    def _on_rto(self) -> None:
        self._rto_handle = None
        if self.state == "failed" or not self._live_outstanding():
            return
        now = self.net.now_us
        self._rto_backoff += 1
        self.log.emit(now, "transport", "rto_fired", conn=self.conn_id, node=self.node,
                      backoff=self._rto_backoff)
        # everything outstanding is presumed lost; slow start resends it all
        requeue: list[tuple] = []
        out = self._outstanding
        while out:
            rec = self.sent.pop(out.popleft(), None)
            if rec is not None:
                self.in_flight_bytes -= rec.length
                requeue.append((rec.stream_id, rec.offset, rec.length, rec.fin, rec.tag))
        for item in requeue:
            self._retx.append(item)
        self._dupacks = 0
        self.cc.on_timeout(now / US_PER_S, self._pn_next)
        self._log_cwnd("timeout")
        s0 = self.streams.get(0)
        if s0 is not None:
            self._recover_offset = s0.sent_offset
        self._arm_loss_timer()
        self.transmit()

    def _log_cwnd(self, reason: str) -> None:
        self.log.emit(self.net.now_us, "cc", "cwnd_update", conn=self.conn_id, node=self.node,
                      reason=reason, cwnd=int(self.cc.cwnd),
                      ssthresh=-1 if self.cc.ssthresh == float("inf") else int(self.cc.ssthresh),
                      phase=self.cc.phase)


def connect(
    net: EmuNet,
    client_node: str,
    server_node: str,
    profile: TransportProfile,
    cc: Controller | None = None,
    service=None,
    recv_window: int | None = None,
    label: str = "",
) -> Connection:
    """Create a client connection and start its handshake now."""
    cc = cc if cc is not None else make_controller("cubic", 10, profile.max_payload_bytes)
    conn = Connection(
        net,
        client_node,
        server_node,
        net.next_conn_id(),
        "client",
        profile,
        cc,
        service=service,
        recv_window=recv_window,
        label=label,
    )
    conn.start_connect()
    return conn


class ServiceListener:
    """Accepts incoming handshakes at a node and spins up per-connection services."""

    def __init__(self, net, node, profiles, cc_factory, service_factory,
                 recv_window=None, early_streams=frozenset()):
        self.net = net
        self.node = node
        self.profiles = profiles  # kind -> TransportProfile
        self.cc_factory = cc_factory  # kind -> Controller
        self.service_factory = service_factory  # conn -> service
        self.recv_window = recv_window
        self.early_streams = early_streams
        net.nodes[node].listener = self

    def on_packet(self, pkt: Packet) -> None:
        frame = pkt.frame
        if not isinstance(frame, HandshakeFrame) or frame.kind not in ("ch", "syn"):
            self.net.log.emit(self.net.now_us, "net", "packet_orphaned", node=self.node, pid=pkt.pid)
            return
        kind = QUIC if frame.kind == "ch" else TCP
        profile = self.profiles[kind]
        conn = Connection(
            self.net,
            self.node,
            pkt.src,
            pkt.conn_id,
            "server",
            profile,
            self.cc_factory(kind),
            recv_window=self.recv_window,
            early_streams=self.early_streams,
        )
        conn.service = self.service_factory(conn)
        conn.receive(pkt)
