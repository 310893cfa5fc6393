import math

import pytest
from hypothesis import given, settings, strategies as st

from satpep.emunet import (
    DROP_QUEUE_OVERFLOW,
    DROP_RANDOM_LOSS,
    Delivered,
    Dropped,
    EmuNet,
    LinkSpec,
    US_PER_MS,
    US_PER_S,
    serialization_us,
)
from satpep.eventlog import EventLog

from conftest import make_chain


def identity_links():
    flat = LinkSpec("flat")
    return {
        ("client", "proxy_st"): flat,
        ("proxy_st", "client"): flat,
        ("proxy_st", "proxy_gw"): flat,
        ("proxy_gw", "proxy_st"): flat,
        ("proxy_gw", "server"): flat,
        ("server", "proxy_gw"): flat,
    }


class TestDelaySchedule:
    def test_static_geo_delay(self):
        link = LinkSpec("sat", [(0.0, 250.0)])
        assert link.delay_ms_at(5.0) == 250.0

    def test_piecewise_lookup(self):
        link = LinkSpec("sat", [(0.0, 16.0), (10.0, 20.0)])
        assert link.delay_ms_at(12.0) == 20.0

    def test_boundary_inclusive_at_segment_start(self):
        link = LinkSpec("sat", [(0.0, 16.0), (10.0, 20.0)])
        assert link.delay_ms_at(10.0) == 20.0

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            LinkSpec("bad", [])
        with pytest.raises(ValueError):
            LinkSpec("bad", [(1.0, 5.0)])  # must start at t=0
        with pytest.raises(ValueError):
            LinkSpec("bad", [(0.0, 5.0), (0.0, 6.0)])  # strictly increasing
        with pytest.raises(ValueError):
            LinkSpec("bad", [(0.0, 5.0)], loss_prob=1.5)
        with pytest.raises(ValueError):
            LinkSpec("bad", [(0.0, 5.0)], queue_capacity_pkts=0)


class TestEnqueue:
    def test_identity_link_delivers_immediately(self):
        net = EmuNet(identity_links(), seed=0)
        link = net.links[("client", "proxy_st")]
        pkt = net.make_packet("client", "server", 1200, 1, None)
        out = link.enqueue(net.rng, pkt, 0)
        assert out == Delivered(0)

    def test_geo_forward_serialization_plus_delay(self):
        # 1200 B at 20 Mbps serializes in 0.48 ms on top of the 250 ms hop
        net = make_chain()
        link = net.links[("proxy_gw", "proxy_st")]
        pkt = net.make_packet("proxy_gw", "client", 1200, 1, None)
        out = link.enqueue(net.rng, pkt, 0)
        assert out == Delivered(250_480)

    def test_back_to_back_serialization(self):
        net = make_chain()
        link = net.links[("proxy_gw", "proxy_st")]
        p1 = net.make_packet("proxy_gw", "client", 1200, 1, None)
        p2 = net.make_packet("proxy_gw", "client", 1200, 1, None)
        assert link.enqueue(net.rng, p1, 0) == Delivered(250_480)
        assert link.enqueue(net.rng, p2, 0) == Delivered(250_960)

    def test_certain_loss(self):
        net = EmuNet(
            {k: (LinkSpec("lossy", loss_prob=1.0) if k == ("client", "proxy_st") else v)
             for k, v in identity_links().items()},
            seed=3,
        )
        link = net.links[("client", "proxy_st")]
        pkt = net.make_packet("client", "server", 100, 1, None)
        assert link.enqueue(net.rng, pkt, 0) == Dropped(DROP_RANDOM_LOSS)

    def test_queue_overflow(self):
        spec = LinkSpec("tight", rate_bps=1_000_000, queue_capacity_pkts=2)
        links = identity_links()
        links[("client", "proxy_st")] = spec
        net = EmuNet(links, seed=0)
        link = net.links[("client", "proxy_st")]
        outcomes = [
            link.enqueue(net.rng, net.make_packet("client", "server", 1200, 1, None), 0)
            for _ in range(4)
        ]
        assert all(isinstance(o, Delivered) for o in outcomes[:2])
        assert outcomes[2] == Dropped(DROP_QUEUE_OVERFLOW)
        assert outcomes[3] == Dropped(DROP_QUEUE_OVERFLOW)


class TestRunUntil:
    def test_empty_queue_advances_clock(self):
        net = make_chain()
        assert net.run_until(15 * US_PER_S) == 0
        assert net.now_us == 15 * US_PER_S

    def test_single_arrival_counts_one_event(self):
        net = make_chain()
        pkt = net.make_packet("proxy_gw", "proxy_st", 1200, 1, None)
        net.send_from("proxy_gw", pkt)
        seen = []
        net.nodes["proxy_st"].listener = type("L", (), {"on_packet": lambda self, p: seen.append(p)})()
        assert net.run_until(15 * US_PER_S) == 1
        assert seen and seen[0].pid == pkt.pid

    def test_same_time_events_run_in_insertion_order(self):
        net = make_chain()
        order = []
        net.schedule(1000, lambda: order.append("a"))
        net.schedule(1000, lambda: order.append("b"))
        net.schedule(1000, lambda: order.append("c"))
        net.run_until(1000)
        assert order == ["a", "b", "c"]

    def test_rejects_past_target(self):
        net = make_chain()
        net.run_until(100)
        with pytest.raises(ValueError):
            net.run_until(50)

    def test_cancelled_events_are_skipped(self):
        net = make_chain()
        fired = []
        h = net.schedule(10, lambda: fired.append(1))
        EmuNet.cancel(h)
        assert net.run_until(100) == 0
        assert not fired


class TestLossCalibration:
    @pytest.mark.parametrize("p", [0.0001, 0.001, 0.01])
    def test_empirical_rate_within_four_sigma(self, p):
        n = 100_000
        spec = LinkSpec("lossy", loss_prob=p)
        links = identity_links()
        links[("client", "proxy_st")] = spec
        net = EmuNet(links, seed=71)
        link = net.links[("client", "proxy_st")]
        drops = 0
        for _ in range(n):
            pkt = net.make_packet("client", "server", 1200, 1, None)
            if isinstance(link.enqueue(net.rng, pkt, 0), Dropped):
                drops += 1
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(drops / n - p) <= 4 * sigma

    def test_burst_units_preserve_marginal_rate(self):
        n = 120_000
        p = 0.01
        k = 6
        spec = LinkSpec("bursty", loss_prob=p, loss_burst_pkts=k)
        links = identity_links()
        links[("client", "proxy_st")] = spec
        net = EmuNet(links, seed=5)
        link = net.links[("client", "proxy_st")]
        drops = 0
        for _ in range(n):
            pkt = net.make_packet("client", "server", 1200, 1, None)
            if isinstance(link.enqueue(net.rng, pkt, 0), Dropped):
                drops += 1
        sigma = math.sqrt(k * p * (1 - p) / n)  # correlated units inflate variance
        assert abs(drops / n - p) <= 4 * sigma


class TestLinkProperties:
    @given(
        sizes=st.lists(st.integers(min_value=60, max_value=1500), min_size=1, max_size=60),
        gaps=st.lists(st.integers(min_value=0, max_value=2000), min_size=60, max_size=60),
        rate=st.sampled_from([0, 1_000_000, 20_000_000]),
        delay_ms=st.sampled_from([0.0, 16.0, 250.0]),
    )
    @settings(max_examples=60, deadline=None)
    def test_fifo_and_latency_floor(self, sizes, gaps, rate, delay_ms):
        spec = LinkSpec("l", [(0.0, delay_ms)], 0.0, rate, 1_000_000)
        links = identity_links()
        links[("client", "proxy_st")] = spec
        net = EmuNet(links, seed=0)
        link = net.links[("client", "proxy_st")]
        t = 0
        arrivals = []
        for size, gap in zip(sizes, gaps):
            t += gap
            pkt = net.make_packet("client", "server", size, 1, None)
            out = link.enqueue(net.rng, pkt, t)
            assert isinstance(out, Delivered)
            # latency floor: no earlier than serialization + propagation
            assert out.arrival_us >= t + serialization_us(size, rate) + int(delay_ms * US_PER_MS)
            arrivals.append(out.arrival_us)
        assert arrivals == sorted(arrivals)  # FIFO among delivered packets

    def test_rate_cap_over_one_second_window(self):
        rate = 20_000_000
        spec = LinkSpec("capped", rate_bps=rate, queue_capacity_pkts=10_000)
        links = identity_links()
        links[("client", "proxy_st")] = spec
        net = EmuNet(links, seed=0)
        link = net.links[("client", "proxy_st")]
        arrivals = []
        for _ in range(4000):
            pkt = net.make_packet("client", "server", 1200, 1, None)
            out = link.enqueue(net.rng, pkt, 0)
            if isinstance(out, Delivered):
                arrivals.append((out.arrival_us, 1200))
        cap = rate / 8 + 1200
        for start, _ in arrivals:
            window = sum(b for t, b in arrivals if start <= t < start + US_PER_S)
            assert window <= cap

    def test_unlimited_rate_never_queues(self):
        spec = LinkSpec("open", queue_capacity_pkts=1)
        links = identity_links()
        links[("client", "proxy_st")] = spec
        net = EmuNet(links, seed=0)
        link = net.links[("client", "proxy_st")]
        for _ in range(100):
            pkt = net.make_packet("client", "server", 1500, 1, None)
            assert isinstance(link.enqueue(net.rng, pkt, 0), Delivered)


class TestDeterminism:
    def _drive(self, seed):
        net = make_chain(loss=0.02, seed=seed, verbose=True)
        for i in range(500):
            pkt = net.make_packet("client", "server", 1200, 1, None)
            net.schedule(i * 100, lambda p=pkt: net.send_from("client", p))
        net.nodes["server"].listener = type("L", (), {"on_packet": lambda self, p: None})()
        net.run_until(2 * US_PER_S)
        return net.log.to_jsonl()

    def test_same_seed_identical_event_logs(self):
        assert self._drive(9) == self._drive(9)

    def test_different_seed_changes_outcome(self):
        assert self._drive(9) != self._drive(10)
