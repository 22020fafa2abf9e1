"""TCP-like reliable flows with pluggable congestion control.

Sequence numbers and windows count payload bytes; every data segment
carries one MSS of payload and occupies ``WIRE_BYTES`` on the wire.
Receivers buffer out-of-order segments and return cumulative ACKs that
echo the send timestamp of the segment that triggered them.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum

from .simcore import (ACK_BYTES, MSS, NS_PER_S, WIRE_BYTES, EventKind, Packet, PacketKind,
                      millis, seconds)

CWND_MAX = 256 * MSS
RTO_MIN = millis(200)
SRTT_GAIN = 1.0 / 8.0
DUPACK_THRESHOLD = 3
RTT_RING = 64


class CCKind(str, Enum):
    ASC_RL = "asc_rl"
    NEWRENO = "newreno"
    CUBIC = "cubic"
    FIXED = "fixed"


class CCEventKind(Enum):
    ACK = "ack"
    LOSS = "loss"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class CCEvent:
    kind: CCEventKind
    acked_bytes: int = 0
    now: int = 0


@dataclass(frozen=True)
class AckOutcome:
    rtt_sample: float | None  # seconds
    newly_acked_bytes: int
    dupack_count: int
    loss: bool = False
    stale: bool = False


@dataclass
class AppTrafficSpec:
    """Periodic ON/OFF source; always has data while ON."""

    on_duration: float = 5.0
    off_duration: float = 1.0
    objective: object = None
    start_time: int = 0  # ns

    def __post_init__(self):
        if self.on_duration <= 0:
            raise ValueError("on_duration must be positive")
        if self.off_duration < 0:
            raise ValueError("off_duration must be non-negative")
        self._on_ns = seconds(self.on_duration)
        self._period_ns = self._on_ns + seconds(self.off_duration)

    def is_on(self, now: int) -> bool:
        if now < self.start_time:
            return False
        if self._period_ns == self._on_ns:
            return True
        return (now - self.start_time) % self._period_ns < self._on_ns

    def next_on(self, now: int) -> int | None:
        """Start time of the next ON period strictly after ``now``."""
        if now < self.start_time:
            return self.start_time
        if self._period_ns == self._on_ns:
            return None
        k = (now - self.start_time) // self._period_ns + 1
        return self.start_time + k * self._period_ns


# --------------------------------------------------------------------------
# congestion controllers
# --------------------------------------------------------------------------


class ExternalCwnd:
    """cwnd is set from outside (ASC_RL inference or a fixed value)."""

    kind = CCKind.ASC_RL

    def __init__(self, kind: CCKind = CCKind.ASC_RL):
        self.kind = kind

    def update(self, flow: "Flow", event: CCEvent) -> int:
        return flow.cwnd


class NewReno:
    def __init__(self, initial_cwnd: int = 2 * MSS, ssthresh: int = CWND_MAX, cwnd_max: int = CWND_MAX):
        self.kind = CCKind.NEWRENO
        self.initial_cwnd = initial_cwnd
        self.ssthresh = ssthresh
        self.cwnd_max = cwnd_max
        self._acc = 0  # bytes acked toward the next avoidance increment

    def update(self, flow: "Flow", event: CCEvent) -> int:
        cwnd = flow.cwnd
        if event.kind is CCEventKind.ACK:
            if cwnd < self.ssthresh:
                cwnd += event.acked_bytes
            else:
                # appropriate byte counting: +1 MSS per cwnd of acked data
                self._acc += event.acked_bytes
                while self._acc >= cwnd:
                    self._acc -= cwnd
                    cwnd += MSS
        elif event.kind is CCEventKind.LOSS:
            self.ssthresh = max(cwnd // 2, 2 * MSS)
            cwnd = self.ssthresh
            self._acc = 0
        else:
            self.ssthresh = max(cwnd // 2, 2 * MSS)
            cwnd = MSS
            self._acc = 0
        flow.cwnd = min(max(cwnd, MSS), self.cwnd_max)
        return flow.cwnd


def cubic_window(t_since_loss: float, w_max: float, c_cubic: float = 0.4, beta: float = 0.7,
                 mss: int = MSS) -> float:
    """CUBIC window in bytes ``t_since_loss`` seconds after a reduction.

    ``c_cubic`` is in segments/s^3, as usual.
    """
    if t_since_loss < 0:
        raise ValueError("t_since_loss must be non-negative")
    wm = w_max / mss
    k = (wm * (1.0 - beta) / c_cubic) ** (1.0 / 3.0)
    w = c_cubic * (t_since_loss - k) ** 3 + wm
    return max(w, 1.0) * mss


class Cubic:
    def __init__(self, initial_cwnd: int = 2 * MSS, c_cubic: float = 0.4, beta: float = 0.7,
                 cwnd_max: int = CWND_MAX):
        self.kind = CCKind.CUBIC
        self.initial_cwnd = initial_cwnd
        self.c = c_cubic
        self.beta = beta
        self.cwnd_max = cwnd_max
        self.ssthresh = cwnd_max
        self.w_max = 0.0
        self.epoch_start = None
        self.k = 0.0
        self.origin = 0.0
        self._cwnd_f = None

    def _reduce(self, cwnd: int) -> None:
        if cwnd < self.w_max:
            self.w_max = cwnd * (1.0 + self.beta) / 2.0  # fast convergence
        else:
            self.w_max = float(cwnd)
        self.epoch_start = None

    def update(self, flow: "Flow", event: CCEvent) -> int:
        cwnd = flow.cwnd if self._cwnd_f is None else self._cwnd_f
        if event.kind is CCEventKind.ACK:
            if cwnd < self.ssthresh:
                cwnd += event.acked_bytes
            else:
                now_s = event.now / NS_PER_S
                if self.epoch_start is None:
                    self.epoch_start = now_s
                    if cwnd < self.w_max:
                        self.k = ((self.w_max - cwnd) / MSS / self.c) ** (1.0 / 3.0)
                        self.origin = self.w_max
                    else:
                        self.k = 0.0
                        self.origin = cwnd
                rtt = flow.srtt if flow.srtt else 0.1
                t = now_s - self.epoch_start + rtt
                target = (self.c * (t - self.k) ** 3) * MSS + self.origin
                segs = cwnd / MSS
                # TCP-friendly region
                w_est = (self.w_max * self.beta
                         + 3 * (1 - self.beta) / (1 + self.beta) * (t / rtt) * MSS)
                acked_segs = event.acked_bytes / MSS
                if target > cwnd:
                    cwnd += (target - cwnd) / segs * acked_segs
                else:
                    cwnd += MSS / (100.0 * segs) * acked_segs
                if w_est > cwnd:
                    cwnd = w_est
        elif event.kind is CCEventKind.LOSS:
            self._reduce(int(cwnd))
            cwnd = max(cwnd * self.beta, 2 * MSS)
            self.ssthresh = cwnd
        else:
            self._reduce(int(cwnd))
            self.ssthresh = max(cwnd * self.beta, 2 * MSS)
            cwnd = MSS
        cwnd = min(max(cwnd, MSS), self.cwnd_max)
        self._cwnd_f = cwnd
        flow.cwnd = int(cwnd)
        return flow.cwnd


def make_controller(kind, **kw):
    kind = CCKind(kind)
    if kind is CCKind.NEWRENO:
        return NewReno(**kw)
    if kind is CCKind.CUBIC:
        return Cubic(**kw)
    return ExternalCwnd(kind)


def newreno_update(flow: "Flow", event: CCEvent) -> int:
    if flow.cc_kind is not CCKind.NEWRENO:
        raise ValueError("newreno_update on a non-NewReno flow")
    return flow.cc.update(flow, event)


# --------------------------------------------------------------------------
# flows
# --------------------------------------------------------------------------


class Flow:
    """Sender and receiver state of one connection.

    ``network`` may be None for unit tests that drive ``pump``/``on_ack``
    by hand.
    """

    def __init__(self, flow_id: int, app_id: int, src: str, dst: str, cc=CCKind.NEWRENO,
                 traffic: AppTrafficSpec | None = None, network=None, cwnd: int | None = None,
                 cwnd_max: int = CWND_MAX, rto_min: int = RTO_MIN):
        if not 0 <= app_id < 1 << 16:
            raise ValueError("app_id must fit in 16 bits")
        self.flow_id = flow_id
        self.app_id = app_id
        self.src = src
        self.dst = dst
        self.cc = make_controller(cc, cwnd_max=cwnd_max) if isinstance(cc, (str, CCKind)) else cc
        self.cc_kind = self.cc.kind
        self.traffic = traffic or AppTrafficSpec()
        self.network = network
        self.cwnd_max = cwnd_max
        default = getattr(self.cc, "initial_cwnd", 2 * MSS)
        self.cwnd = int(min(max(cwnd if cwnd is not None else default, MSS), cwnd_max))
        self.rto_min = rto_min
        # sender
        self.snd_una = 0
        self.snd_nxt = 0
        self.dupacks = 0
        self.in_recovery = False
        self.recover = 0
        self.rto_high = 0  # snd_nxt when the last timeout fired
        # after a timeout an externally set window regrows from one segment
        self.restart_win = None
        # fast-recovery window inflation: one segment per duplicate ACK
        self.inflate = 0
        self.srtt = None  # seconds
        self.backoff = 1
        self._deadline = None
        self._timer_pending = False
        # receiver
        self.rcv_nxt = 0
        self._ooo = set()
        # accounting
        self.rtt_samples = deque(maxlen=RTT_RING)
        self.loss_events = 0
        self.timeouts = 0
        self.retransmits = 0
        self.data_sent = 0
        self.acked_total = 0
        self.delivered_total = 0  # in-order payload bytes at the receiver
        self.step = StepCounters()
        self.sent_listener = None
        self.max_excess = 0  # max of in_flight - send_window observed right after a send

    # -- properties -------------------------------------------------------
    @property
    def bytes_in_flight(self) -> int:
        return self.snd_nxt - self.snd_una

    @property
    def send_window(self) -> int:
        base = self.cwnd if self.restart_win is None else min(self.cwnd, self.restart_win)
        return base + self.inflate

    @property
    def rto(self) -> int:
        base = self.rto_min
        if self.srtt is not None:
            base = max(base, int(2 * self.srtt * NS_PER_S))
        return base * self.backoff

    # -- sending ----------------------------------------------------------
    def pump(self, now: int) -> list:
        """Packets allowed by the window right now (sequence space advanced)."""
        if not self.traffic.is_on(now):
            return []
        out = []
        win = self.send_window
        while self.snd_nxt - self.snd_una < win:
            out.append(Packet(self.flow_id, self.snd_nxt, WIRE_BYTES, PacketKind.DATA, now,
                              self.src, self.dst))
            self.snd_nxt += MSS
        return out

    def pump_and_send(self, now: int) -> int:
        pkts = self.pump(now)
        for pkt in pkts:
            self._transmit(pkt, now)
        if pkts:
            excess = self.bytes_in_flight - self.send_window
            if excess > self.max_excess:
                self.max_excess = excess
        return len(pkts)

    def _transmit(self, pkt: Packet, now: int) -> None:
        self.data_sent += 1
        self.step.sent += 1
        if self.network is not None:
            self.network.send(pkt)
            self._arm(now)
        if self.sent_listener is not None:
            self.sent_listener(self)

    def _retransmit(self, now: int) -> None:
        self.retransmits += 1
        pkt = Packet(self.flow_id, self.snd_una, WIRE_BYTES, PacketKind.DATA, now, self.src, self.dst)
        self._transmit(pkt, now)

    # -- timers -----------------------------------------------------------
    def _arm(self, now: int, restart: bool = False) -> None:
        if self._deadline is None or restart:
            self._deadline = now + self.rto
        if not self._timer_pending:
            self._timer_pending = True
            self.network.engine.schedule(self._deadline, EventKind.TIMER_EXPIRY, self._on_timer,
                                         None, self.flow_id)

    def _on_timer(self, _arg) -> None:
        self._timer_pending = False
        now = self.network.engine.now
        if self.snd_una == self.snd_nxt or self._deadline is None:
            self._deadline = None
            return
        if now < self._deadline:
            self._arm(now)
            return
        self.on_timeout(now)

    def on_timeout(self, now: int) -> None:
        self.timeouts += 1
        self.loss_events += 1
        self.step.losses += 1
        self.backoff = min(self.backoff * 2, 64)
        self.cc.update(self, CCEvent(CCEventKind.TIMEOUT, 0, now))
        if self.cc_kind in (CCKind.ASC_RL, CCKind.FIXED):
            self.restart_win = MSS
        # go-back-N: everything outstanding is resent as the window allows
        self.in_recovery = False
        self.inflate = 0
        self.rto_high = max(self.rto_high, self.snd_nxt)
        self.recover = self.snd_nxt
        self.dupacks = 0
        self._deadline = None
        self.snd_nxt = self.snd_una
        self.retransmits += 1
        if self.network is not None:
            self.pump_and_send(now)
            if self.snd_nxt == self.snd_una:  # OFF period: still resend the first hole
                self._retransmit(now)
                self.retransmits -= 1
                self.snd_nxt = self.snd_una + MSS
            self._arm(now, restart=True)
        else:
            self.snd_nxt = self.snd_una + MSS

    def start(self) -> None:
        """Schedule the ON-period wake-ups on the network's engine."""
        engine = self.network.engine
        first = self.traffic.start_time if engine.now <= self.traffic.start_time else engine.now
        engine.schedule(first, EventKind.TIMER_EXPIRY, self._on_wake, None, self.flow_id)

    def _on_wake(self, _arg) -> None:
        now = self.network.engine.now
        self.pump_and_send(now)
        nxt = self.traffic.next_on(now)
        if nxt is not None:
            self.network.engine.schedule(nxt, EventKind.TIMER_EXPIRY, self._on_wake, None, self.flow_id)

    # -- receiving --------------------------------------------------------
    def on_data(self, pkt: Packet, now: int = 0) -> Packet:
        """Receiver side: absorb a data segment, return the cumulative ACK."""
        seq = pkt.seq
        if seq == self.rcv_nxt:
            self.step.received_bytes += MSS
            self.rcv_nxt += MSS
            ooo = self._ooo
            while self.rcv_nxt in ooo:
                ooo.discard(self.rcv_nxt)
                self.rcv_nxt += MSS
            self.delivered_total = self.rcv_nxt
        elif seq > self.rcv_nxt and seq not in self._ooo:
            self.step.received_bytes += MSS
            self._ooo.add(seq)
        return Packet(self.flow_id, 0, ACK_BYTES, PacketKind.ACK, now, self.dst, self.src,
                      ack=self.rcv_nxt, echo=pkt.send_time)

    def on_ack(self, ack: Packet, now: int) -> AckOutcome:
        if ack.flow_id != self.flow_id:
            raise ValueError("ACK for another flow")
        a = ack.ack
        if a < self.snd_una:
            return AckOutcome(None, 0, self.dupacks, stale=True)
        if a > self.snd_una:
            newly = a - self.snd_una
            self.snd_una = a
            if a > self.snd_nxt:  # receiver already held resent data
                self.snd_nxt = a
            self.dupacks = 0
            self.backoff = 1
            self.acked_total += newly
            st = self.step
            st.acked_bytes += newly
            st.acked_segments += newly // MSS
            sample = (now - ack.echo) / NS_PER_S
            self._rtt_sample(sample)
            if not self.in_recovery:  # no growth until recovery ends
                self.cc.update(self, CCEvent(CCEventKind.ACK, newly, now))
            if self.restart_win is not None:
                self.restart_win += newly
                if self.restart_win >= self.cwnd:
                    self.restart_win = None
            if self.in_recovery:
                if a >= self.recover:
                    self.in_recovery = False
                    self.inflate = 0
                else:
                    self.inflate = max(self.inflate - newly, 0) + MSS
                    self._retransmit(now)  # partial ack: next hole
            if self.network is not None:
                if self.snd_una == self.snd_nxt:
                    self._deadline = None
                else:
                    self._arm(now, restart=True)
                self.pump_and_send(now)
            return AckOutcome(sample, newly, 0)
        # duplicate
        if self.snd_nxt == self.snd_una:
            return AckOutcome(None, 0, self.dupacks)
        self.dupacks += 1
        loss = False
        if self.dupacks == DUPACK_THRESHOLD and not self.in_recovery and self.snd_una >= self.rto_high:
            loss = True
            self.loss_events += 1
            self.step.losses += 1
            self.cc.update(self, CCEvent(CCEventKind.LOSS, 0, now))
            self.in_recovery = True
            self.recover = self.snd_nxt
            self.inflate = DUPACK_THRESHOLD * MSS
            self._retransmit(now)
        elif self.in_recovery:
            self.inflate += MSS
        if self.network is not None:
            self.pump_and_send(now)
        return AckOutcome(None, 0, self.dupacks, loss=loss)

    def _rtt_sample(self, sample: float) -> None:
        if self.srtt is None:
            self.srtt = sample
        else:
            self.srtt += SRTT_GAIN * (sample - self.srtt)
        self.rtt_samples.append(sample)
        st = self.step
        if st.rtt_n:
            st.jitter_sum += abs(sample - st.last_rtt)
            st.jitter_n += 1
        st.last_rtt = sample
        st.rtt_sum += sample
        st.rtt_n += 1


class StepCounters:
    """Per-DRL-step accumulators, reset by the harness after each step."""

    __slots__ = ("acked_bytes", "acked_segments", "rtt_sum", "rtt_n", "jitter_sum", "jitter_n",
                 "last_rtt", "losses", "sent",
                 "received_bytes")

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.acked_bytes = 0
        self.acked_segments = 0
        self.rtt_sum = 0.0
        self.rtt_n = 0
        self.jitter_sum = 0.0
        self.jitter_n = 0
        self.last_rtt = 0.0
        self.losses = 0
        self.sent = 0
        self.received_bytes = 0  # new payload reaching the receiver, in any order


def set_cwnd(flow: Flow, cwnd_bytes: float) -> None:
    if flow.cc_kind not in (CCKind.ASC_RL, CCKind.FIXED):
        raise ValueError(f"cannot set cwnd on a {flow.cc_kind.value} flow")
    if not math.isfinite(cwnd_bytes):
        raise ValueError("cwnd must be finite")
    flow.cwnd = int(min(max(cwnd_bytes, MSS), flow.cwnd_max))


def connect(flow: Flow, network) -> None:
    """Attach the flow's endpoints to a runtime network (one flow per host pair)."""
    flow.network = network
    handlers = network.__dict__.setdefault("_flow_handlers", {})
    handlers[flow.flow_id] = flow

    def host_rx(pkt, _handlers=handlers, _net=network):
        f = _handlers[pkt.flow_id]
        if pkt.kind is PacketKind.DATA:
            _net.send(f.on_data(pkt, _net.engine.now))
        else:
            f.on_ack(pkt, _net.engine.now)

    if flow.src not in network._hosts:
        network.attach(flow.src, host_rx)
    if flow.dst not in network._hosts:
        network.attach(flow.dst, host_rx)
