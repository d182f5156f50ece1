"""Acknowledgement tracking, loss detection and congestion control.

Loss detection combines a packet-reordering threshold with an adaptive
time threshold: a packet is declared lost only when at least
``PACKET_THRESHOLD`` later packets were acknowledged *and* it has been
outstanding longer than the reordering window.  The window starts near
the RTT and grows whenever a packet declared lost turns out to have been
merely reordered (its ACK arrives later), so sustained datagram
reordering stops triggering spurious retransmissions after a few
round trips.  A probe timeout (PTO) with exponential backoff covers the
tail cases where no ACKs arrive at all.

The congestion controller is a byte-counting NewReno: slow start to
``ssthresh``, additive increase afterwards, multiplicative decrease at
most once per recovery epoch.
"""

from __future__ import annotations

import time
from typing import Iterable

PACKET_THRESHOLD = 3
TIME_THRESHOLD_NUM = 9  # 9/8 of the smoothed RTT
TIME_THRESHOLD_DEN = 8
GRANULARITY = 0.001
MAX_ACK_DELAY = 0.025
INITIAL_RTT = 0.333
REORDER_WINDOW_MIN = 0.002
REORDER_WINDOW_MAX = 0.300
PTO_MAX = 10.0

INITIAL_WINDOW_PACKETS = 32
MIN_WINDOW_PACKETS = 2
MAX_WINDOW_BYTES = 4 * 1024 * 1024
LOSS_REDUCTION_FACTOR = 0.5
PERSISTENT_CONGESTION_PTO_COUNT = 2


class RttEstimator:
    """RFC 6298-style smoothed RTT with ack-delay correction."""

    def __init__(self):
        self.latest: float | None = None
        self.smoothed: float = INITIAL_RTT
        self.variance: float = INITIAL_RTT / 2
        self.min_rtt: float = float("inf")
        self._has_sample = False

    def on_sample(self, rtt: float, ack_delay: float) -> None:
        if rtt <= 0:
            return
        self.latest = rtt
        self.min_rtt = min(self.min_rtt, rtt)
        # Only discount the peer's ack delay when it leaves the sample
        # above the best RTT seen, mirroring RFC 9002's adjustment rule.
        adjusted = rtt
        if rtt - ack_delay >= self.min_rtt:
            adjusted = rtt - min(ack_delay, MAX_ACK_DELAY)
        if not self._has_sample:
            self.smoothed = adjusted
            self.variance = adjusted / 2
            self._has_sample = True
        else:
            self.variance = 0.75 * self.variance + 0.25 * abs(self.smoothed - adjusted)
            self.smoothed = 0.875 * self.smoothed + 0.125 * adjusted

    def pto_interval(self) -> float:
        return self.smoothed + max(4 * self.variance, GRANULARITY) + MAX_ACK_DELAY

    def reorder_time_threshold(self) -> float:
        base = max(self.smoothed, self.latest or 0.0)
        return max(base * TIME_THRESHOLD_NUM / TIME_THRESHOLD_DEN, GRANULARITY)


class SentPacket:
    __slots__ = ("packet_number", "time_sent", "size", "ack_eliciting", "frames")

    def __init__(self, packet_number: int, time_sent: float, size: int,
                 ack_eliciting: bool, frames: list):
        self.packet_number = packet_number
        self.time_sent = time_sent
        self.size = size
        self.ack_eliciting = ack_eliciting
        # Retransmittable frame descriptors; see Connection._requeue_frames.
        self.frames = frames


class NewRenoController:
    def __init__(self, max_payload: int):
        self.max_payload = max_payload
        self.cwnd = INITIAL_WINDOW_PACKETS * max_payload
        self.ssthresh = float("inf")
        self._recovery_start: float = 0.0

    @property
    def min_cwnd(self) -> int:
        return MIN_WINDOW_PACKETS * self.max_payload

    def on_ack(self, acked_bytes: int) -> None:
        if self.cwnd >= MAX_WINDOW_BYTES:
            return
        if self.cwnd < self.ssthresh:
            self.cwnd = min(self.cwnd + acked_bytes, MAX_WINDOW_BYTES)
        else:
            self.cwnd = min(
                self.cwnd + self.max_payload * acked_bytes // max(self.cwnd, 1),
                MAX_WINDOW_BYTES,
            )

    def on_congestion_event(self, sent_time: float, now: float) -> None:
        # At most one window reduction per recovery epoch.
        if sent_time <= self._recovery_start:
            return
        self._recovery_start = now
        self.cwnd = max(int(self.cwnd * LOSS_REDUCTION_FACTOR), self.min_cwnd)
        self.ssthresh = self.cwnd

    def on_persistent_congestion(self) -> None:
        self.cwnd = self.min_cwnd
        self.ssthresh = self.cwnd
        self._recovery_start = 0.0


class LossRecovery:
    """Tracks in-flight packets and drives retransmission decisions."""

    def __init__(self, max_payload: int, clock=time.monotonic):
        self.rtt = RttEstimator()
        self.congestion = NewRenoController(max_payload)
        self.clock = clock
        self.sent: dict[int, SentPacket] = {}
        self.bytes_in_flight = 0
        self.largest_acked = -1
        self._largest_acked_time_sent = 0.0
        self.pto_count = 0
        self.reorder_window = REORDER_WINDOW_MIN
        # Packets declared lost whose ACK might still arrive; used to
        # detect spurious loss declarations and widen the window.
        self._lost_history: dict[int, float] = {}
        self._loss_time: float | None = None
        self._last_eliciting_sent: float | None = None

    # -- sending ---------------------------------------------------------

    def on_packet_sent(self, packet: SentPacket) -> None:
        # Non-eliciting packets (pure ACKs) are never acknowledged by the
        # peer, so tracking them would only pollute loss detection.
        if not packet.ack_eliciting:
            return
        self.sent[packet.packet_number] = packet
        self.bytes_in_flight += packet.size
        self._last_eliciting_sent = packet.time_sent

    def can_send(self, next_size: int) -> bool:
        return self.bytes_in_flight + next_size <= self.congestion.cwnd

    # -- acknowledgements --------------------------------------------------

    def on_ack_received(self, largest: int, ack_delay_us: int,
                        ranges: Iterable[tuple[int, int]]) -> tuple[list[SentPacket], list[SentPacket]]:
        """Process an ACK; returns (newly_acked, newly_lost)."""
        now = self.clock()
        newly_acked: list[SentPacket] = []
        acked_bytes = 0
        for lo, hi in ranges:
            if hi - lo > len(self.sent) + len(self._lost_history):
                # Degenerate range wider than anything outstanding; scan
                # our own state instead of iterating the peer's span.
                candidates = [pn for pn in self.sent if lo <= pn <= hi]
                candidates += [pn for pn in self._lost_history if lo <= pn <= hi]
            else:
                candidates = range(lo, hi + 1)
            for pn in candidates:
                pkt = self.sent.pop(pn, None)
                if pkt is not None:
                    newly_acked.append(pkt)
                    if pkt.ack_eliciting:
                        self.bytes_in_flight -= pkt.size
                        acked_bytes += pkt.size
                elif pn in self._lost_history:
                    # Spurious loss: the packet was reordered, not lost.
                    sent_time = self._lost_history.pop(pn)
                    lateness = now - sent_time - self.rtt.smoothed
                    self.reorder_window = min(
                        max(self.reorder_window * 2, lateness * 1.25, REORDER_WINDOW_MIN),
                        REORDER_WINDOW_MAX,
                    )

        if not newly_acked:
            return [], []

        newest = max(newly_acked, key=lambda p: p.packet_number)
        if newest.packet_number > self.largest_acked:
            self.largest_acked = newest.packet_number
            self._largest_acked_time_sent = newest.time_sent
            self.rtt.on_sample(now - newest.time_sent, ack_delay_us / 1e6)

        self.pto_count = 0
        self.congestion.on_ack(acked_bytes)
        newly_lost = self.detect_lost_packets(now)
        return newly_acked, newly_lost

    # -- loss detection ----------------------------------------------------

    def _effective_reorder_window(self) -> float:
        return max(self.reorder_window, self.rtt.reorder_time_threshold())

    def detect_lost_packets(self, now: float) -> list[SentPacket]:
        self._loss_time = None
        if self.largest_acked < 0:
            return []
        window = self._effective_reorder_window()
        lost: list[SentPacket] = []
        # self.sent is insertion-ordered and packet numbers are assigned
        # monotonically, so plain dict order is ascending already.
        for pn, pkt in self.sent.items():
            if pn > self.largest_acked - PACKET_THRESHOLD:
                break
            deadline = pkt.time_sent + window
            if deadline <= now:
                lost.append(pkt)
            else:
                self._loss_time = deadline if self._loss_time is None else min(self._loss_time, deadline)
                break
        if lost:
            for pkt in lost:
                del self.sent[pkt.packet_number]
                if pkt.ack_eliciting:
                    self.bytes_in_flight -= pkt.size
                self._lost_history[pkt.packet_number] = pkt.time_sent
            self._trim_lost_history()
            self.congestion.on_congestion_event(lost[-1].time_sent, now)
        return lost

    def _trim_lost_history(self, cap: int = 4096) -> None:
        if len(self._lost_history) > cap:
            for pn in sorted(self._lost_history)[: len(self._lost_history) - cap // 2]:
                del self._lost_history[pn]

    # -- timers -------------------------------------------------------------

    def next_timeout(self) -> float | None:
        """Absolute monotonic deadline for the next loss/PTO action."""
        if not any(p.ack_eliciting for p in self.sent.values()):
            return None
        if self._loss_time is not None:
            return self._loss_time
        base = self._last_eliciting_sent or self.clock()
        return base + self.rtt.pto_interval() * (2 ** min(self.pto_count, 6))

    def on_timeout(self, now: float) -> list[SentPacket]:
        """Handle an expired timer; returns packets to retransmit."""
        lost = self.detect_lost_packets(now)
        if lost:
            return lost
        # Probe timeout: treat the oldest outstanding eliciting packet as
        # lost so its frames get retransmitted immediately.
        eliciting = [p for p in self.sent.values() if p.ack_eliciting]
        if not eliciting:
            return []
        self.pto_count += 1
        if self.pto_count >= PERSISTENT_CONGESTION_PTO_COUNT:
            self.congestion.on_persistent_congestion()
        oldest = min(eliciting, key=lambda p: p.packet_number)
        del self.sent[oldest.packet_number]
        self.bytes_in_flight -= oldest.size
        self._lost_history[oldest.packet_number] = oldest.time_sent
        self._trim_lost_history()
        return [oldest]
