import pytest

from satpep.emunet import EmuNet, LinkSpec
from satpep.eventlog import EventLog


def make_chain(
    sat_delay_ms=250.0,
    internet_delay_ms=40.0,
    loss=0.0,
    forward_rate_bps=20_000_000,
    return_rate_bps=8_000_000,
    queue_pkts=1208,
    seed=1,
    verbose=False,
    sat_burst=1,
):
    """Standard 4-node chain with direct LinkSpec control for unit tests."""
    sched = [(0.0, sat_delay_ms)]
    inet = [(0.0, internet_delay_ms)]
    links = {
        ("client", "proxy_st"): LinkSpec("lan-up"),
        ("proxy_st", "client"): LinkSpec("lan-down"),
        ("proxy_st", "proxy_gw"): LinkSpec("sat-return", sched, loss, return_rate_bps,
                                           queue_pkts, sat_burst),
        ("proxy_gw", "proxy_st"): LinkSpec("sat-forward", sched, loss, forward_rate_bps,
                                           queue_pkts, sat_burst),
        ("proxy_gw", "server"): LinkSpec("net-up", inet),
        ("server", "proxy_gw"): LinkSpec("net-down", inet),
    }
    return EmuNet(links, seed=seed, log=EventLog(verbose=verbose))


class Sink:
    """Service that records delivered stream segments."""

    def __init__(self):
        self.segments = []  # (stream_id, length, tag, fin)
        self.established_at = None
        self.failed = None

    def on_established(self, conn):
        self.established_at = conn.net.now_us

    def on_stream_data(self, conn, stream_id, length, tag, fin):
        self.segments.append((stream_id, length, tag, fin))

    def on_failed(self, conn, reason):
        self.failed = reason

    def bytes_on(self, stream_id):
        return sum(s[1] for s in self.segments if s[0] == stream_id)

    def tags_on(self, stream_id):
        return [s[2] for s in self.segments if s[0] == stream_id and s[2] is not None]

    def fin_on(self, stream_id):
        return any(s[3] for s in self.segments if s[0] == stream_id)


@pytest.fixture
def chain():
    return make_chain()
