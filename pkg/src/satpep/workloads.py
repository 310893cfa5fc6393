"""Measurement workloads: bulk transfer and web page load.

Bulk: the client connects (optionally through the proxy chain), sends a
100-byte request, and the server answers with a continuous stream for the
run duration.  The client samples goodput in 100 ms bins and the sender
that drives the forward bottleneck is sampled for its congestion window.

Web: a page manifest of sized objects is fetched either h3-style (one
connection, many streams, at most six concurrent) or h1-style (up to six
serial keep-alive connections).  Response Start, First Contentful Paint,
and Page Load Time are measured from the first handshake packet.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

from .congestion import make_controller
from .emunet import EmuNet, US_PER_MS, US_PER_S
from .eventlog import EventLog
from .transport import (
    CONTROL_STREAM_ID,
    Connection,
    ServiceListener,
    TransportProfile,
    connect,
)

REQUEST_BYTES = 100
PREAMBLE_BYTES = 300
MAX_WEB_STREAMS = 6
MAX_WEB_CONNS = 6
SAMPLE_INTERVAL_MS = 100

ROOT_BYTES = 30_000
STYLE_BYTES = 20_000
# Fixed heavy-tail body sizes; together with the root and two style objects
# the default page holds 75 objects summing to exactly 880,000 bytes.
BODY_BYTES = (
    98412, 58516, 43172, 34794, 29432, 25670, 22868, 20689, 18939, 17500,
    16293, 15264, 14374, 13597, 12912, 12301, 11755, 11261, 10814, 10406,
    10032, 9688, 9370, 9076, 8802, 8547, 8309, 8085, 7875, 7677,
    7491, 7315, 7148, 6989, 6839, 6696, 6560, 6430, 6306, 6187,
    6074, 5965, 5861, 5760, 5664, 5572, 5482, 5397, 5314, 5234,
    5157, 5082, 5010, 4940, 4873, 4807, 4744, 4682, 4623, 4565,
    4509, 4454, 4401, 4349, 4299, 4250, 4202, 4156, 4111, 4067,
    4023, 3982,
)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    id: str
    size_bytes: int
    render_critical: bool = False
    discovered_by: str | None = None


class PageManifest:
    """Objects of one page plus their discovery dependencies."""

    def __init__(self, objects: list[ObjectSpec]):
        self.objects = list(objects)
        self._validate()

    def _validate(self) -> None:
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ManifestError("object ids must be unique")
        roots = [o for o in self.objects if o.discovered_by is None]
        if len(roots) != 1:
            raise ManifestError(f"need exactly one root object, found {len(roots)}")
        by_id = {o.id: o for o in self.objects}
        for o in self.objects:
            if o.size_bytes < 1:
                raise ManifestError(f"object {o.id} has non-positive size")
            if o.discovered_by is not None and o.discovered_by not in by_id:
                raise ManifestError(f"object {o.id} discovered by unknown {o.discovered_by!r}")
        # discovery chains must terminate at the root
        for o in self.objects:
            seen = set()
            cur = o
            while cur.discovered_by is not None:
                if cur.id in seen:
                    raise ManifestError(f"discovery cycle through {cur.id!r}")
                seen.add(cur.id)
                cur = by_id[cur.discovered_by]

    @property
    def root(self) -> ObjectSpec:
        return next(o for o in self.objects if o.discovered_by is None)

    @property
    def total_bytes(self) -> int:
        return sum(o.size_bytes for o in self.objects)

    def children(self) -> dict[str, list[ObjectSpec]]:
        out: dict[str, list[ObjectSpec]] = {}
        for o in self.objects:
            if o.discovered_by is not None:
                out.setdefault(o.discovered_by, []).append(o)
        return out

    def sizes(self) -> dict[str, int]:
        return {o.id: o.size_bytes for o in self.objects}

    def to_json(self) -> str:
        return json.dumps(
            {
                "objects": [
                    {
                        "id": o.id,
                        "size_bytes": o.size_bytes,
                        "render_critical": o.render_critical,
                        "discovered_by": o.discovered_by,
                    }
                    for o in self.objects
                ]
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "PageManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
        objs = doc.get("objects")
        if not isinstance(objs, list) or not objs:
            raise ManifestError("manifest must contain a non-empty 'objects' list")
        specs = []
        for raw in objs:
            try:
                specs.append(
                    ObjectSpec(
                        id=str(raw["id"]),
                        size_bytes=int(raw["size_bytes"]),
                        render_critical=bool(raw.get("render_critical", False)),
                        discovered_by=raw.get("discovered_by"),
                    )
                )
            except KeyError as exc:
                raise ManifestError(f"manifest object missing field {exc}") from exc
        return cls(specs)

    @classmethod
    def load(cls, path) -> "PageManifest":
        with open(path) as fh:
            return cls.from_json(fh.read())


def default_manifest() -> PageManifest:
    objects = [ObjectSpec("root", ROOT_BYTES, render_critical=True)]
    for i in (1, 2):
        objects.append(ObjectSpec(f"style-{i}", STYLE_BYTES, render_critical=True, discovered_by="root"))
    for i, size in enumerate(BODY_BYTES, start=1):
        objects.append(ObjectSpec(f"body-{i:02d}", size, discovered_by="root"))
    return PageManifest(objects)


# -- results ------------------------------------------------------------


@dataclass
class BulkResult:
    establishment_ms: float | None
    ttfb_ms: float | None
    goodput: list[tuple[int, int]]  # (t_ms, bytes delivered in the preceding 100 ms)
    cwnd_series: list[tuple[int, int, int]]  # (t_ms, cwnd_bytes, ssthresh_bytes or -1)
    total_bytes: int
    status: str = "ok"

    def cumulative(self) -> list[tuple[int, int]]:
        total = 0
        out = []
        for t, b in self.goodput:
            total += b
            out.append((t, total))
        return out


@dataclass
class WebResult:
    rs_ms: float | None
    fcp_ms: float | None
    plt_ms: float | None
    completions_ms: dict[str, float] = field(default_factory=dict)
    status: str = "ok"

    def __post_init__(self):
        if self.status == "ok":
            assert self.rs_ms is not None and self.fcp_ms is not None and self.plt_ms is not None
            assert self.rs_ms <= self.fcp_ms <= self.plt_ms


# -- bulk workload --------------------------------------------------------


class _BulkClient:
    def __init__(self, net: EmuNet):
        self.net = net
        self.established_us: int | None = None
        self.ttfb_us: int | None = None
        self.failed: str | None = None

    def on_established(self, conn: Connection) -> None:
        self.established_us = self.net.now_us
        conn.send(0, REQUEST_BYTES, tag="bulk")
        self.net.log.emit(self.net.now_us, "workload", "bulk_request_sent", conn=conn.conn_id)

    def on_stream_data(self, conn, stream_id, length, tag, fin) -> None:
        if length and self.ttfb_us is None:
            self.ttfb_us = self.net.now_us
            self.net.log.emit(self.net.now_us, "workload", "bulk_first_byte", conn=conn.conn_id)

    def on_failed(self, conn, reason) -> None:
        self.failed = reason


class _BulkServer:
    def __init__(self, net: EmuNet):
        self.net = net

    def on_stream_data(self, conn, stream_id, length, tag, fin) -> None:
        if tag == "bulk":
            conn.open_unbounded(stream_id)


def run_bulk(
    net: EmuNet,
    profile: TransportProfile,
    endpoint_cc: tuple[str, int],
    pep_enabled: bool,
    duration_s: float = 15.0,
    sat_probe=None,
) -> BulkResult:
    """One bulk-download run; ``sat_probe`` locates the bottleneck-driving sender."""
    mss = profile.max_payload_bytes
    ServiceListener(
        net,
        "server",
        {profile.kind: profile},
        lambda kind: make_controller(endpoint_cc[0], endpoint_cc[1], mss),
        lambda conn: _BulkServer(net),
    )
    client = _BulkClient(net)
    target = "proxy_st" if pep_enabled else "server"
    conn = connect(net, "client", target, profile,
                   make_controller(endpoint_cc[0], endpoint_cc[1], mss), service=client)

    goodput: list[tuple[int, int]] = []
    cwnd_rows: list[tuple[int, int, int]] = []
    prev = [0]

    def resolve_sender():
        if sat_probe is not None:
            return sat_probe()
        return net.nodes["server"].connections.get(conn.conn_id)

    def sample(t_ms: int) -> None:
        got = conn.bytes_received_total  # bytes received on arrival, deduplicated
        goodput.append((t_ms, got - prev[0]))
        prev[0] = got
        sender = resolve_sender()
        if sender is not None:
            cc = sender.cc
            ss = -1 if cc.ssthresh == float("inf") else int(cc.ssthresh)
            cwnd_rows.append((t_ms, int(cc.cwnd), ss))
            net.log.emit(net.now_us, "cc", "cwnd_update", conn=sender.conn_id,
                         node=sender.node, reason="sample", cwnd=int(cc.cwnd),
                         ssthresh=ss, phase=cc.phase)

    steps = round(duration_s * 1000 / SAMPLE_INTERVAL_MS)
    for k in range(1, steps + 1):
        t_ms = k * SAMPLE_INTERVAL_MS
        net.schedule(t_ms * US_PER_MS, (lambda t=t_ms: sample(t)))

    net.run_until(int(duration_s * US_PER_S))

    if client.failed:
        status = f"failed:{client.failed}"
    elif client.established_us is None:
        status = "failed:not_established"
    else:
        status = "ok"
    return BulkResult(
        establishment_ms=None if client.established_us is None else client.established_us / US_PER_MS,
        ttfb_ms=None if client.ttfb_us is None else client.ttfb_us / US_PER_MS,
        goodput=goodput,
        cwnd_series=cwnd_rows,
        total_bytes=prev[0],  # as of the final sample, so bins sum to the total
        status=status,
    )


# -- web workload -----------------------------------------------------------


class _WebServer:
    """Serves manifest objects; h3 flavour announces its control preamble.

    The h3 server accepts any number of queued requests on one connection
    but transfers at most six responses concurrently (FIFO by arrival);
    the h1 server answers its single stream strictly in request order.
    """

    def __init__(self, net: EmuNet, manifest: PageManifest, h3: bool):
        self.net = net
        self.sizes = manifest.sizes()
        self.h3 = h3
        self.backlog: deque[tuple[int, str]] = deque()
        self.serving: set[int] = set()

    def on_reply_sent(self, conn: Connection) -> None:
        if self.h3:
            # control stream rides out right behind the handshake reply
            conn.send(CONTROL_STREAM_ID, PREAMBLE_BYTES, tag="h3-control")

    def on_stream_data(self, conn, stream_id, length, tag, fin) -> None:
        if tag and tag.startswith("req:"):
            oid = tag[4:]
            if oid not in self.sizes:
                conn.abort("unknown_object")
                return
            if not self.h3:
                conn.send(stream_id, self.sizes[oid], fin=False, tag=f"resp:{oid}")
                return
            self.backlog.append((stream_id, oid))
            self._kick(conn)

    def on_stream_sent(self, conn: Connection, stream_id: int) -> None:
        if stream_id in self.serving:
            self.serving.discard(stream_id)
            self.net.log.emit(self.net.now_us, "workload", "response_done",
                              stream=stream_id, serving=len(self.serving))
            self._kick(conn)

    def _kick(self, conn: Connection) -> None:
        while self.backlog and len(self.serving) < MAX_WEB_STREAMS:
            sid, oid = self.backlog.popleft()
            self.serving.add(sid)
            self.net.log.emit(self.net.now_us, "workload", "response_started",
                              stream=sid, obj=oid, serving=len(self.serving))
            conn.send(sid, self.sizes[oid], fin=True, tag=f"resp:{oid}")


class _WebClientH3:
    def __init__(self, net: EmuNet, manifest: PageManifest):
        self.net = net
        self.manifest = manifest
        self.children = manifest.children()
        self.root = manifest.root
        self.conn: Connection | None = None
        self.active: dict[int, list] = {}  # sid -> [obj, received]
        self.queue: deque[ObjectSpec] = deque()
        self.completions_us: dict[str, int] = {}
        self.rs_us: int | None = None
        self.preamble_seen = False
        self.established = False
        self.requested_root = False
        self.failed: str | None = None
        self._next_sid = 0
        self.root_sid: int | None = None

    @property
    def done(self) -> bool:
        return len(self.completions_us) == len(self.manifest.objects)

    def on_established(self, conn: Connection) -> None:
        self.established = True
        self._maybe_start()

    def on_stream_data(self, conn, stream_id, length, tag, fin) -> None:
        if stream_id == CONTROL_STREAM_ID:
            if not self.preamble_seen:
                self.preamble_seen = True
                self.net.log.emit(self.net.now_us, "workload", "preamble_received", conn=conn.conn_id)
                self._maybe_start()
            return
        entry = self.active.get(stream_id)
        if entry is None:
            return
        if length and stream_id == self.root_sid and self.rs_us is None:
            self.rs_us = self.net.now_us
            self.net.log.emit(self.net.now_us, "workload", "response_start", obj=self.root.id)
        entry[1] += length
        if fin:
            self._complete(stream_id, entry)

    def on_failed(self, conn, reason) -> None:
        self.failed = reason

    def _maybe_start(self) -> None:
        if self.established and self.preamble_seen and not self.requested_root:
            self.requested_root = True
            self._request(self.root)

    def _request(self, obj: ObjectSpec) -> None:
        # requests ride the single connection as soon as objects are known;
        # the server bounds how many responses it transfers at once
        sid = self._next_sid
        self._next_sid += 4
        if obj is self.root:
            self.root_sid = sid
        self.active[sid] = [obj, 0]
        self.conn.send(sid, REQUEST_BYTES, fin=True, tag=f"req:{obj.id}")
        self.net.log.emit(self.net.now_us, "workload", "request_sent", obj=obj.id,
                          stream=sid, outstanding=len(self.active))

    def _complete(self, sid: int, entry: list) -> None:
        obj, received = entry
        if received != obj.size_bytes:
            self.failed = f"size_mismatch:{obj.id}"
            return
        del self.active[sid]
        self.completions_us[obj.id] = self.net.now_us
        self.net.log.emit(self.net.now_us, "workload", "object_complete", obj=obj.id,
                          bytes=received)
        for child in self.children.get(obj.id, ()):
            self.queue.append(child)
        self._fill()

    def _fill(self) -> None:
        while self.queue:
            self._request(self.queue.popleft())


class _H1ConnState:
    __slots__ = ("conn", "established", "busy", "received")

    def __init__(self, conn: Connection):
        self.conn = conn
        self.established = False
        self.busy: ObjectSpec | None = None
        self.received = 0


class _WebClientH1:
    def __init__(self, net: EmuNet, manifest: PageManifest, profile: TransportProfile,
                 endpoint_cc: tuple[str, int], target: str):
        self.net = net
        self.manifest = manifest
        self.children = manifest.children()
        self.root = manifest.root
        self.profile = profile
        self.endpoint_cc = endpoint_cc
        self.target = target
        self.states: list[_H1ConnState] = []
        self.by_conn: dict[int, _H1ConnState] = {}
        self.queue: deque[ObjectSpec] = deque()
        self.completions_us: dict[str, int] = {}
        self.rs_us: int | None = None
        self.failed: str | None = None

    @property
    def done(self) -> bool:
        return len(self.completions_us) == len(self.manifest.objects)

    def start(self) -> None:
        self.queue.append(self.root)
        self._dispatch()

    def _open_conn(self) -> _H1ConnState:
        mss = self.profile.max_payload_bytes
        conn = connect(self.net, "client", self.target, self.profile,
                       make_controller(self.endpoint_cc[0], self.endpoint_cc[1], mss),
                       service=self)
        state = _H1ConnState(conn)
        self.states.append(state)
        self.by_conn[conn.conn_id] = state
        assert len(self.states) <= MAX_WEB_CONNS
        self.net.log.emit(self.net.now_us, "workload", "h1_conn_opened", conn=conn.conn_id,
                          open=len(self.states))
        return state

    def on_established(self, conn: Connection) -> None:
        self.by_conn[conn.conn_id].established = True
        self._dispatch()

    def on_stream_data(self, conn, stream_id, length, tag, fin) -> None:
        state = self.by_conn[conn.conn_id]
        if state.busy is None:
            return
        if length and state.busy is self.root and self.rs_us is None:
            self.rs_us = self.net.now_us
            self.net.log.emit(self.net.now_us, "workload", "response_start", obj=self.root.id)
        state.received += length
        if state.received >= state.busy.size_bytes:
            if state.received != state.busy.size_bytes:
                self.failed = f"size_mismatch:{state.busy.id}"
                return
            obj = state.busy
            state.busy = None
            state.received = 0
            self.completions_us[obj.id] = self.net.now_us
            self.net.log.emit(self.net.now_us, "workload", "object_complete", obj=obj.id,
                              bytes=obj.size_bytes)
            for child in self.children.get(obj.id, ()):
                self.queue.append(child)
            self._dispatch()

    def on_failed(self, conn, reason) -> None:
        self.failed = reason

    def _dispatch(self) -> None:
        # hand queued objects to idle established connections
        for state in self.states:
            if not self.queue:
                return
            if state.established and state.busy is None:
                self._request(state, self.queue.popleft())
        # open further connections lazily while work remains queued
        idle_or_coming = sum(1 for s in self.states if s.busy is None)
        while self.queue and len(self.states) < MAX_WEB_CONNS and len(self.queue) > idle_or_coming:
            self._open_conn()
            idle_or_coming += 1

    def _request(self, state: _H1ConnState, obj: ObjectSpec) -> None:
        state.busy = obj
        state.received = 0
        state.conn.send(0, REQUEST_BYTES, tag=f"req:{obj.id}")
        self.net.log.emit(self.net.now_us, "workload", "request_sent", obj=obj.id,
                          conn=state.conn.conn_id, active=sum(1 for s in self.states if s.busy))


def run_web(
    net: EmuNet,
    http_mode: str,
    profile: TransportProfile,
    endpoint_cc: tuple[str, int],
    pep_enabled: bool,
    manifest: PageManifest | None = None,
    deadline_s: float = 180.0,
) -> WebResult:
    """Fetch one page and report RS/FCP/PLT (milliseconds from t=0)."""
    if http_mode not in ("h3", "h1"):
        raise ValueError("http_mode must be 'h3' or 'h1'")
    manifest = manifest if manifest is not None else default_manifest()
    h3 = http_mode == "h3"
    mss = profile.max_payload_bytes
    ServiceListener(
        net,
        "server",
        {profile.kind: profile},
        lambda kind: make_controller(endpoint_cc[0], endpoint_cc[1], mss),
        lambda conn: _WebServer(net, manifest, h3),
        early_streams=frozenset({CONTROL_STREAM_ID}) if h3 else frozenset(),
    )
    target = "proxy_st" if pep_enabled else "server"
    if h3:
        client = _WebClientH3(net, manifest)
        client.conn = connect(net, "client", target, profile,
                              make_controller(endpoint_cc[0], endpoint_cc[1], mss),
                              service=client)
    else:
        client = _WebClientH1(net, manifest, profile, endpoint_cc, target)
        client.start()

    deadline_us = int(deadline_s * US_PER_S)
    step = 500 * US_PER_MS
    while not client.done and client.failed is None and net.now_us < deadline_us:
        net.run_until(min(net.now_us + step, deadline_us))

    if client.failed is not None:
        return WebResult(None, None, None, status=f"failed:{client.failed}")
    if not client.done:
        return WebResult(None, None, None, status="failed:deadline")

    comp_ms = {k: v / US_PER_MS for k, v in client.completions_us.items()}
    critical = [o.id for o in manifest.objects if o.render_critical] or [manifest.root.id]
    fcp = max(comp_ms[c] for c in critical)
    plt = max(comp_ms.values())
    return WebResult(rs_ms=client.rs_us / US_PER_MS, fcp_ms=fcp, plt_ms=plt,
                     completions_ms=comp_ms, status="ok")
