"""Congestion controllers: NewReno and Cubic with configurable initial window.

Both controllers keep the window in bytes and count acknowledged bytes
directly during slow start, so acknowledgment frequency does not throttle
growth.  Window reductions are gated per loss episode by a packet-number
boundary (``in_recovery_until``): losses of packets sent before the
boundary neither grow nor re-reduce the window.
"""

from __future__ import annotations

INF = float("inf")

CUBIC_C = 0.4
CUBIC_BETA = 0.7
NEWRENO_BETA = 0.5
# Reno-region growth per window's worth of acknowledged bytes (in packets).
CUBIC_RENO_GAIN = 3.0 * (1.0 - CUBIC_BETA) / (1.0 + CUBIC_BETA)
MIN_WINDOW_PKTS = 2

SLOW_START = "slow_start"
AVOIDANCE = "congestion_avoidance"


class UnknownAlgorithm(ValueError):
    pass


class Controller:
    """Shared state and slow-start behaviour; subclasses fill in avoidance."""

    algorithm = "?"

    def __init__(self, iw_packets: int = 10, mss_bytes: int = 1200):
        if iw_packets < 1:
            raise ValueError("iw_packets must be >= 1")
        if mss_bytes < 1:
            raise ValueError("mss_bytes must be >= 1")
        self.iw_packets = iw_packets
        self.mss = mss_bytes
        self.cwnd = float(iw_packets * mss_bytes)
        self.ssthresh = INF
        self.in_recovery_until = -1  # highest packet number covered by the current episode
        self._acked_accum = 0.0

    @property
    def floor(self) -> float:
        return float(MIN_WINDOW_PKTS * self.mss)

    @property
    def phase(self) -> str:
        return SLOW_START if self.cwnd < self.ssthresh else AVOIDANCE

    def on_packet_acked(self, acked_bytes: int, now_s: float, pn: int | None = None) -> float:
        """Grow the window for newly acknowledged bytes; returns the new cwnd."""
        if pn is not None and pn <= self.in_recovery_until:
            return self.cwnd
        if self.cwnd < self.ssthresh:
            self.cwnd += acked_bytes
        else:
            self._avoidance(acked_bytes, now_s)
        return self.cwnd

    def on_congestion_event(self, now_s: float, largest_lost_pn: int, next_pn: int) -> bool:
        """Apply one reduction per loss episode; returns True if applied."""
        if largest_lost_pn <= self.in_recovery_until:
            return False
        self.in_recovery_until = next_pn - 1
        self._reduce(now_s)
        self.cwnd = max(self.ssthresh, self.floor)
        self._acked_accum = 0.0
        return True

    def on_timeout(self, now_s: float = 0.0, next_pn: int | None = None) -> float:
        """Collapse to the minimum window and re-enter slow start."""
        if next_pn is not None:
            self.in_recovery_until = next_pn - 1
        self._reduce(now_s)
        self.cwnd = self.floor
        self._acked_accum = 0.0
        return self.cwnd

    def _avoidance(self, acked_bytes: int, now_s: float) -> None:
        raise NotImplementedError

    def _reduce(self, now_s: float) -> None:
        raise NotImplementedError


class NewReno(Controller):
    algorithm = "newreno"

    def _avoidance(self, acked_bytes: int, now_s: float) -> None:
        self._acked_accum += acked_bytes
        if self._acked_accum >= self.cwnd:
            self._acked_accum -= self.cwnd
            self.cwnd += self.mss

    def _reduce(self, now_s: float) -> None:
        # re-derived from the current window each episode: pinning it to a
        # historical minimum would ratchet the window down permanently
        self.ssthresh = self.cwnd * NEWRENO_BETA


class Cubic(Controller):
    algorithm = "cubic"

    def __init__(self, iw_packets: int = 10, mss_bytes: int = 1200):
        super().__init__(iw_packets, mss_bytes)
        self.w_max_pkts = 0.0
        self.k_s = 0.0
        self.epoch_start_s: float | None = None
        self._w_est_pkts = 0.0

    def window_at(self, t_since_epoch_s: float) -> float:
        """Cubic target window (packets) at the given time since the epoch."""
        return CUBIC_C * (t_since_epoch_s - self.k_s) ** 3 + self.w_max_pkts

    def _avoidance(self, acked_bytes: int, now_s: float) -> None:
        if self.epoch_start_s is None:
            # Avoidance entered without a recorded loss epoch (e.g. a unit
            # test poking ssthresh directly): anchor the curve here.
            self.epoch_start_s = now_s
            self.w_max_pkts = max(self.w_max_pkts, self.cwnd / self.mss)
            diff = max(self.w_max_pkts - self.cwnd / self.mss, 0.0)
            self.k_s = (diff / CUBIC_C) ** (1.0 / 3.0)
            self._w_est_pkts = self.cwnd / self.mss
        target = self.window_at(now_s - self.epoch_start_s)
        self._w_est_pkts += CUBIC_RENO_GAIN * acked_bytes / self.cwnd
        best = max(target, self._w_est_pkts) * self.mss
        if best > self.cwnd:
            self.cwnd = best

    def _reduce(self, now_s: float) -> None:
        self.w_max_pkts = self.cwnd / self.mss
        self.ssthresh = self.cwnd * CUBIC_BETA
        self.k_s = (self.w_max_pkts * (1.0 - CUBIC_BETA) / CUBIC_C) ** (1.0 / 3.0)
        self.epoch_start_s = now_s
        self._w_est_pkts = self.w_max_pkts * CUBIC_BETA


_ALGORITHMS = {"newreno": NewReno, "cubic": Cubic}


def make_controller(algorithm: str, iw_packets: int = 10, mss_bytes: int = 1200) -> Controller:
    try:
        cls = _ALGORITHMS[algorithm]
    except KeyError:
        raise UnknownAlgorithm(f"unknown congestion control algorithm: {algorithm!r}") from None
    return cls(iw_packets, mss_bytes)
