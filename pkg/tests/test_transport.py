import math

import pytest
from hypothesis import given, settings, strategies as st

from satpep.congestion import make_controller
from satpep.emunet import US_PER_MS, US_PER_S
from satpep.transport import (
    AckFrequencyConfig,
    AckOfUnsentPacket,
    Connection,
    QuicAckFrame,
    SendAfterFin,
    ServiceListener,
    TransportProfile,
    UnknownStream,
    connect,
)

from conftest import Sink, make_chain

GEO_RTT_MS = 580.0
LEO_RTT_MS = 112.0


def quic_profile(**kw):
    return TransportProfile("quic", **kw)


def tcp_profile(tls_rtts=0, **kw):
    return TransportProfile("tcp", tls_rtts=tls_rtts, **kw)


def serve(net, profile, cc=("cubic", 10), sink=None, early=frozenset()):
    sink = sink if sink is not None else Sink()
    ServiceListener(
        net,
        "server",
        {profile.kind: profile},
        lambda kind: make_controller(cc[0], cc[1], profile.max_payload_bytes),
        lambda conn: sink,
        early_streams=early,
    )
    return sink


def dial(net, profile, cc=("cubic", 10), sink=None):
    sink = sink if sink is not None else Sink()
    conn = connect(net, "client", "server", profile,
                   make_controller(cc[0], cc[1], profile.max_payload_bytes), service=sink)
    return conn, sink


def data_pns(conn):
    return sorted(pn for pn, rec in conn.sent.items() if rec.stream_id is not None)


class TestProfileValidation:
    def test_quic_rejects_tls_rtts(self):
        with pytest.raises(ValueError):
            TransportProfile("quic", tls_rtts=1)

    def test_small_payload_rejected(self):
        with pytest.raises(ValueError):
            TransportProfile("tcp", max_payload_bytes=128)

    def test_ack_frequency_validation(self):
        with pytest.raises(ValueError):
            AckFrequencyConfig(ack_eliciting_threshold=0)


class TestHandshakeArithmetic:
    def test_quic_geo_one_rtt(self):
        net = make_chain()
        serve(net, quic_profile())
        conn, _ = dial(net, quic_profile())
        net.run_until(5 * US_PER_S)
        est = conn.established_at_us / US_PER_MS
        assert GEO_RTT_MS <= est <= GEO_RTT_MS + 10

    def test_quic_leo_one_rtt(self):
        net = make_chain(sat_delay_ms=16.0)
        serve(net, quic_profile())
        conn, _ = dial(net, quic_profile())
        net.run_until(5 * US_PER_S)
        est = conn.established_at_us / US_PER_MS
        assert LEO_RTT_MS <= est <= LEO_RTT_MS + 10

    def test_tcp_geo_one_rtt(self):
        net = make_chain()
        serve(net, tcp_profile())
        conn, _ = dial(net, tcp_profile())
        net.run_until(5 * US_PER_S)
        est = conn.established_at_us / US_PER_MS
        assert GEO_RTT_MS <= est <= GEO_RTT_MS + 10

    def test_tcp_two_tls_rtts_triples_establishment(self):
        net = make_chain()
        serve(net, tcp_profile(tls_rtts=2))
        conn, _ = dial(net, tcp_profile(tls_rtts=2))
        net.run_until(5 * US_PER_S)
        est = conn.established_at_us / US_PER_MS
        assert 3 * GEO_RTT_MS <= est <= 3 * GEO_RTT_MS + 10

    def test_server_records_establishment(self):
        net = make_chain()
        serve(net, quic_profile())
        conn, _ = dial(net, quic_profile())
        net.run_until(5 * US_PER_S)
        server_conn = net.nodes["server"].connections[conn.conn_id]
        assert server_conn.established_at_us is not None
        assert server_conn.established_at_us >= conn.established_at_us

    def test_handshake_timeout_when_unreachable(self):
        net = make_chain(loss=1.0)
        serve(net, quic_profile())
        sink = Sink()
        conn, _ = dial(net, quic_profile(), sink=sink)
        net.run_until(15 * US_PER_S)
        assert conn.state == "failed"
        assert sink.failed == "connect_timeout"

    def test_first_rtt_sample_initializes_estimator(self):
        net = make_chain()
        serve(net, quic_profile())
        conn, _ = dial(net, quic_profile())
        net.run_until(int(0.582 * US_PER_S))  # just past the handshake reply
        # first sample: smoothed = sample, variance = sample / 2
        assert conn.rtt.srtt_us == pytest.approx(581_680, abs=2_000)
        assert conn.rtt.rttvar_us == pytest.approx(conn.rtt.srtt_us / 2)


class TestSendValidation:
    def _established_pair(self, profile):
        net = make_chain()
        sink = serve(net, profile)
        conn, _ = dial(net, profile)
        net.run_until(2 * US_PER_S)
        return net, conn, sink

    def test_quic_accepts_large_stream_write(self):
        net, conn, _ = self._established_pair(quic_profile())
        assert conn.send(0, 1_000_000, fin=True) == 1_000_000

    def test_tcp_rejects_nonzero_stream(self):
        net, conn, _ = self._established_pair(tcp_profile())
        with pytest.raises(UnknownStream):
            conn.send(4, 100)

    def test_send_after_fin_rejected(self):
        net, conn, _ = self._established_pair(quic_profile())
        conn.send(0, 100, fin=True)
        with pytest.raises(SendAfterFin):
            conn.send(0, 100)

    def test_control_stream_is_server_only(self):
        net, conn, _ = self._established_pair(quic_profile())
        with pytest.raises(UnknownStream):
            conn.send(3, 100)


class TestTransmitWindow:
    def _stalled_conn(self, iw):
        # huge sat delay keeps acks away so the initial burst is window-limited
        net = make_chain(sat_delay_ms=2_000.0)
        serve(net, quic_profile())
        conn, _ = dial(net, quic_profile(), cc=("newreno", iw))
        net.run_until(5 * US_PER_S)  # handshake completes at ~4.08s
        assert conn.state == "established"
        return net, conn

    def test_window_limited_burst(self):
        net, conn = self._stalled_conn(10)
        conn.send(0, 1_000_000)
        assert len(data_pns(conn)) == 10
        assert conn.in_flight_bytes == 12_000

    def test_initial_window_hundred_burst(self):
        net, conn = self._stalled_conn(100)
        conn.send(0, 1_000_000)
        assert len(data_pns(conn)) == 100

    def test_partial_window_tops_up_by_one(self):
        net, conn = self._stalled_conn(10)
        conn.send(0, 9 * 1200)
        assert len(data_pns(conn)) == 9
        conn.send(0, 5000)
        assert len(data_pns(conn)) == 10


class TestAckProcessing:
    def _isolated_client(self):
        net = make_chain(sat_delay_ms=2_000.0)
        serve(net, quic_profile())
        conn, _ = dial(net, quic_profile())
        net.run_until(5 * US_PER_S)
        return net, conn

    def test_ack_of_all_in_flight_clears_and_grows(self):
        net, conn = self._isolated_client()
        conn.send(0, 12_000)
        assert conn.in_flight_bytes == 12_000
        pns = data_pns(conn)
        cc_before = conn.cc.cwnd
        conn._on_quic_ack(QuicAckFrame(pns[-1], (), 0, None))
        assert conn.in_flight_bytes == 0
        assert conn.cc.cwnd == cc_before + 12_000  # ten slow-start ack credits

    def test_ack_of_unsent_packet_aborts(self):
        net, conn = self._isolated_client()
        conn.send(0, 1200)
        with pytest.raises(AckOfUnsentPacket):
            conn._on_quic_ack(QuicAckFrame(999, (), 0, None))


class TestAckPolicy:
    def _receiving_server(self, threshold, max_delay_ms=25.0):
        prof = quic_profile(ack_frequency=AckFrequencyConfig(threshold, max_delay_ms))
        net = make_chain()
        sink = serve(net, prof)
        conn, _ = dial(net, prof)
        net.run_until(2 * US_PER_S)
        server = net.nodes["server"].connections[conn.conn_id]
        return net, conn, server

    def test_second_packet_acks_immediately(self):
        net, conn, server = self._receiving_server(2)
        base = server.acks_sent
        conn.send(0, 2 * 1200)
        net.run_until(net.now_us + int(0.3 * US_PER_S))
        assert server.acks_sent == base + 1
        assert server.ack_timer_fires == 0

    def test_single_packet_waits_for_delayed_ack(self):
        net, conn, server = self._receiving_server(2)
        base_fires = server.ack_timer_fires
        conn.send(0, 1200)
        net.run_until(net.now_us + int(0.4 * US_PER_S))
        assert server.ack_timer_fires == base_fires + 1

    def test_in_order_ack_count_bound(self):
        # threshold k over n in-order packets: acks <= ceil(n/k) + timer fires
        k = 4
        net, conn, server = self._receiving_server(k, max_delay_ms=25.0)
        base = server.acks_sent
        n = 200
        conn.send(0, n * 1200)
        net.run_until(net.now_us + 30 * US_PER_S)
        acks = server.acks_sent - base
        assert acks <= math.ceil(n / k) + server.ack_timer_fires


class TestLossDetection:
    def test_packet_threshold_declares_oldest_lost(self):
        net = make_chain(sat_delay_ms=2_000.0)
        serve(net, quic_profile())
        conn, _ = dial(net, quic_profile())
        net.run_until(5 * US_PER_S)
        conn.send(0, 5 * 1200)
        pns = data_pns(conn)
        assert len(pns) == 5
        # acks for the 2nd..4th packets leave the 1st three numbers behind
        conn._on_quic_ack(QuicAckFrame(-1, ((pns[1], pns[3]),), 0, None))
        lost = [e for e in net.log.events
                if e[2] == "packet_lost" and e[3]["stream"] is not None]
        assert len(lost) == 1 and lost[0][3]["pn"] == pns[0]
        assert any(e[2] == "cwnd_update" and e[3]["reason"] == "recovery" for e in net.log.events)

    def test_reliable_delivery_zero_loss(self):
        net = make_chain()
        sink = serve(net, quic_profile())
        conn, _ = dial(net, quic_profile())
        net.run_until(2 * US_PER_S)
        conn.send(0, 250_000, fin=True, tag="blob")
        net.run_until(10 * US_PER_S)
        assert sink.bytes_on(0) == 250_000
        assert sink.fin_on(0)
        assert sink.tags_on(0) == ["blob"]

    @pytest.mark.parametrize("kind", ["quic", "tcp"])
    @pytest.mark.parametrize("loss,seed", [(0.02, 3), (0.10, 4), (0.25, 5)])
    def test_reliable_delivery_under_loss(self, kind, loss, seed):
        net = make_chain(sat_delay_ms=16.0, loss=loss, seed=seed)
        prof = quic_profile() if kind == "quic" else tcp_profile()
        sink = serve(net, prof)
        conn, _ = dial(net, prof)
        total = 120_000
        net.run_until(2 * US_PER_S)
        if conn.state != "established":
            net.run_until(12 * US_PER_S)
        assert conn.state == "established"
        conn.send(0, total, fin=True, tag="payload")
        net.run_until(90 * US_PER_S)
        # every byte exactly once, in order, with the boundary tag intact
        assert sink.bytes_on(0) == total
        assert sink.tags_on(0) == ["payload"]
        assert sink.fin_on(0)

    def test_pto_probe_fires_without_acks(self):
        net = make_chain(loss=1.0)  # data vanishes after the handshake
        serve(net, quic_profile())
        conn, _ = dial(net, quic_profile())
        # complete the handshake over a clean link first
        net.links[("proxy_st", "proxy_gw")].spec.loss_prob = 0.0
        net.links[("proxy_gw", "proxy_st")].spec.loss_prob = 0.0
        net.run_until(2 * US_PER_S)
        assert conn.state == "established"
        net.links[("proxy_st", "proxy_gw")].spec.loss_prob = 1.0
        net.links[("proxy_gw", "proxy_st")].spec.loss_prob = 1.0
        cwnd_before = conn.cc.cwnd
        conn.send(0, 1200)
        net.run_until(net.now_us + 10 * US_PER_S)
        probes = [e for e in net.log.events if e[2] == "pto_probe" and e[3]["node"] == "client"]
        assert probes
        assert probes[0][3]["count"] == 1
        # first probe leaves the window alone; the second collapses it
        timeouts = [e for e in net.log.events
                    if e[2] == "cwnd_update" and e[3]["reason"] == "timeout"]
        assert timeouts and conn.cc.cwnd < cwnd_before


class TestNoDataBeforeHandshake:
    @pytest.mark.parametrize("kind", ["quic", "tcp"])
    def test_event_log_ordering(self, kind):
        net = make_chain(verbose=True)
        prof = quic_profile() if kind == "quic" else tcp_profile()

        class EagerClient(Sink):
            def on_established(self, conn):
                super().on_established(conn)
                conn.send(0, 50_000)

        sink = serve(net, prof)
        conn, _ = dial(net, prof, sink=EagerClient())
        net.run_until(10 * US_PER_S)
        completions = {
            (e[3]["node"], e[3].get("role")): e[0]
            for e in net.log.events if e[2] == "handshake_complete"
        }
        for e in net.log.events:
            if e[2] == "packet_sent":
                node = e[3]["node"]
                key = (node, "client") if node == "client" else (node, "server")
                assert key in completions and e[0] >= completions[key]


class TestWindowRespect:
    def test_in_flight_never_exceeds_cwnd_plus_one(self):
        net = make_chain()
        serve(net, quic_profile())
        conn, _ = dial(net, quic_profile())
        net.run_until(2 * US_PER_S)
        conn.send(0, 2_000_000)
        checks = []

        def probe():
            checks.append(conn.in_flight_bytes <= conn.cc.cwnd + 1200 or conn._retx)
            if net.now_us < 8 * US_PER_S:
                net.schedule(net.now_us + 10_000, probe)

        net.schedule(net.now_us + 10_000, probe)
        net.run_until(8 * US_PER_S)
        assert checks and all(checks)
