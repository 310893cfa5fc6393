"""Connection-splitting performance enhancing proxy.

A proxy terminates each incoming connection at its node, originates a new
connection of the same kind toward its configured next hop, and relays
stream data between the two legs with identity stream-id mapping.  Two
orchestration modes exist:

* ``default``: the incoming handshake is answered immediately while the
  onward connection establishes in parallel, so the client can start
  sending before the far side exists; data parks at the proxy meanwhile.
* ``h3_capable``: the handshake reply toward the previous hop is withheld
  until the onward handshake completes, which serializes establishment
  along the chain and lets server-initiated control streams reach the
  client before its first request.

Relays apply back-pressure: each leg advertises a bounded receive-credit
window and the splice only consumes from one leg what fits into the other
leg's send backlog, so a fast upstream segment cannot overrun the buffer
ahead of a slow satellite segment.
"""

from __future__ import annotations

from dataclasses import dataclass

from .congestion import make_controller
from .emunet import EmuNet, Packet, US_PER_MS
from .transport import (
    CONTROL_STREAM_ID,
    Connection,
    HandshakeFrame,
    QUIC,
    TCP,
    TransportProfile,
)

DEFAULT_MODE = "default"
H3_CAPABLE_MODE = "h3_capable"
DEFAULT_BUFFER_CAP = 16 * 1024 * 1024
READVERTISE_INTERVAL_US = 250 * US_PER_MS


@dataclass
class ProxyConfig:
    node: str
    next_hop: str
    mode: str = DEFAULT_MODE
    listener_cc: tuple[str, int] = ("cubic", 10)  # applied to connections this proxy accepts
    onward_cc: tuple[str, int] = ("cubic", 10)  # applied to connections this proxy originates
    buffer_cap_bytes: int = DEFAULT_BUFFER_CAP
    advertise_credit: bool = True

    def __post_init__(self):
        if self.mode not in (DEFAULT_MODE, H3_CAPABLE_MODE):
            raise ValueError(f"unknown proxy mode {self.mode!r}")
        if self.buffer_cap_bytes < 4096:
            raise ValueError("buffer_cap_bytes too small")


class Proxy:
    """Listener installed at a proxy node; spawns one Splice per incoming connection."""

    def __init__(self, net: EmuNet, config: ProxyConfig, profiles: dict[str, TransportProfile]):
        self.net = net
        self.config = config
        self.profiles = profiles
        self.splices: list[Splice] = []
        net.nodes[config.node].listener = self

    def on_packet(self, pkt: Packet) -> None:
        frame = pkt.frame
        if not isinstance(frame, HandshakeFrame) or frame.kind not in ("ch", "syn"):
            self.net.log.emit(self.net.now_us, "net", "packet_orphaned", node=self.config.node, pid=pkt.pid)
            return
        kind = QUIC if frame.kind == "ch" else TCP
        cfg = self.config
        profile = self.profiles[kind]
        mss = profile.max_payload_bytes
        window = cfg.buffer_cap_bytes // 2 if cfg.advertise_credit else None
        hold = cfg.mode == H3_CAPABLE_MODE and kind == QUIC
        incoming = Connection(
            self.net,
            cfg.node,
            pkt.src,
            pkt.conn_id,
            "server",
            profile,
            make_controller(cfg.listener_cc[0], cfg.listener_cc[1], mss),
            auto_read=False,
            recv_window=window,
            hold_reply=hold,
            label=f"{cfg.node}<-{pkt.src}",
        )
        splice = Splice(self, incoming, kind)
        incoming.service = splice
        self.splices.append(splice)
        self.net.log.emit(
            self.net.now_us,
            "pep",
            "incoming_accepted",
            node=cfg.node,
            conn=incoming.conn_id,
            kind=kind,
            mode=cfg.mode,
        )
        onward = Connection(
            self.net,
            cfg.node,
            cfg.next_hop,
            self.net.next_conn_id(),
            "client",
            profile,
            make_controller(cfg.onward_cc[0], cfg.onward_cc[1], mss),
            service=splice,
            auto_read=False,
            recv_window=window,
            label=f"{cfg.node}->{cfg.next_hop}",
        )
        splice.onward = onward
        onward.start_connect()
        incoming.receive(pkt)

    def sat_sender(self) -> Connection | None:
        """The endpoint that sends response data onto this proxy's accepted leg."""
        return self.splices[0].incoming if self.splices else None


class Splice:
    """Relays stream data between an accepted leg and an onward leg."""

    def __init__(self, proxy: Proxy, incoming: Connection, kind: str):
        self.proxy = proxy
        self.net = proxy.net
        self.cap = proxy.config.buffer_cap_bytes
        self.incoming = incoming
        self.onward: Connection | None = None
        self.kind = kind
        self.closed = False
        self._pumping = False
        self._preamble_logged = False
        self._readv_handle = None
        if proxy.config.advertise_credit:
            self._readv_handle = self.net.schedule(
                self.net.now_us + READVERTISE_INTERVAL_US, self._on_readvertise
            )

    # -- service callbacks from either leg --------------------------------

    def on_established(self, conn: Connection) -> None:
        if conn is self.onward:
            self.net.log.emit(
                self.net.now_us,
                "pep",
                "onward_established",
                node=self.proxy.config.node,
                conn=conn.conn_id,
            )
            if self.incoming.hold_reply:
                self.incoming.release_reply()
        self._pump(self.incoming)
        if self.onward is not None:
            self._pump(self.onward)

    def on_readable(self, conn: Connection, stream_id: int) -> None:
        self._pump(conn)

    def on_writable(self, conn: Connection) -> None:
        src = self.incoming if conn is self.onward else self.onward
        if src is not None:
            self._pump(src)

    def on_failed(self, conn: Connection, reason: str) -> None:
        if self.closed:
            return
        if conn is self.onward:
            self.net.log.emit(
                self.net.now_us,
                "pep",
                "proxy_error",
                node=self.proxy.config.node,
                reason=reason,
            )
            self.incoming.abort("proxy_error")
        elif self.onward is not None:
            self.onward.abort("peer_closed")
        self.close()

    # -- relay -------------------------------------------------------------

    def _pump(self, src: Connection) -> None:
        if self.closed or self._pumping or src is None:
            return
        dest = self.onward if src is self.incoming else self.incoming
        if dest is None or dest.state == "failed" or src.state == "failed":
            return
        self._pumping = True
        try:
            # moving bytes into the destination's send queue is the relay
            # buffer; the transport itself withholds them until that leg's
            # handshake completes, which yields store-and-forward semantics
            dest.writable_watermark = self.cap // 4
            for sid in sorted(src.streams):
                stream = src.streams[sid]
                if not stream.ready:
                    continue
                # each direction owns half the splice budget: credit bounds the
                # un-consumed bytes on the source leg to the other half
                budget = self.cap // 2 - dest.unsent_bytes
                if budget <= 0:
                    break
                for length, tag, fin in src.read_stream(sid, budget):
                    if length == 0:
                        self.net.log.emit(self.net.now_us, "pep", "empty_segment_skipped",
                                          node=self.proxy.config.node, stream=sid)
                        continue
                    dest.send(sid, length, fin=fin, tag=tag)
                    if sid == CONTROL_STREAM_ID and not self._preamble_logged:
                        self._preamble_logged = True
                        self.net.log.emit(
                            self.net.now_us,
                            "pep",
                            "preamble_relayed",
                            node=self.proxy.config.node,
                            conn=dest.conn_id,
                        )
            self._check_overload(dest)
        finally:
            self._pumping = False

    def _check_overload(self, dest: Connection) -> None:
        held = dest.unsent_bytes
        for stream in self.incoming.streams.values():
            held += stream.ready_bytes
        if self.onward is not None:
            for stream in self.onward.streams.values():
                held += stream.ready_bytes
        if held > self.cap:
            self.net.log.emit(
                self.net.now_us,
                "pep",
                "proxy_overload",
                node=self.proxy.config.node,
                held=held,
                cap=self.cap,
            )
            self.incoming.abort("proxy_overload")
            if self.onward is not None:
                self.onward.abort("proxy_overload")
            self.close()

    def _on_readvertise(self) -> None:
        self._readv_handle = None
        if self.closed:
            return
        # lost credit updates must not wedge a stalled sender
        self.incoming.readvertise_credit()
        if self.onward is not None:
            self.onward.readvertise_credit()
        self._readv_handle = self.net.schedule(
            self.net.now_us + READVERTISE_INTERVAL_US, self._on_readvertise
        )

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        EmuNet.cancel(self._readv_handle)
        self._readv_handle = None
        self.net.log.emit(self.net.now_us, "pep", "splice_closed", node=self.proxy.config.node,
                          conn=self.incoming.conn_id)


def install_chain(
    net: EmuNet,
    mode: str,
    profiles: dict[str, TransportProfile],
    lan_cc: tuple[str, int],
    sat_cc: tuple[str, int],
    net_cc: tuple[str, int],
    buffer_cap_bytes: int = DEFAULT_BUFFER_CAP,
    advertise_credit: bool = True,
) -> dict[str, Proxy]:
    """Install the two-proxy chain with per-segment transport tuning.

    The satellite segment's tuning applies to both of its endpoints: the
    terminal proxy originates that connection and the gateway proxy accepts
    it, and the gateway side is the one that sends response data across it.
    """
    st = Proxy(
        net,
        ProxyConfig(
            node="proxy_st",
            next_hop="proxy_gw",
            mode=mode,
            listener_cc=lan_cc,
            onward_cc=sat_cc,
            buffer_cap_bytes=buffer_cap_bytes,
            advertise_credit=advertise_credit,
        ),
        profiles,
    )
    gw = Proxy(
        net,
        ProxyConfig(
            node="proxy_gw",
            next_hop="server",
            mode=mode,
            listener_cc=sat_cc,
            onward_cc=net_cc,
            buffer_cap_bytes=buffer_cap_bytes,
            advertise_credit=advertise_credit,
        ),
        profiles,
    )
    return {"proxy_st": st, "proxy_gw": gw}
