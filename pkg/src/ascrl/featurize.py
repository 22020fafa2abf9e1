"""Per-app system state: twelve scalars built from a flow's step history."""

from __future__ import annotations

import math
import zlib
from collections import deque
from dataclasses import astuple, dataclass, fields
from enum import Enum

import numpy as np

from .simcore import MSS, NS_PER_S


class EmptyHistory(ValueError):
    pass


class Metric(str, Enum):
    THROUGHPUT = "throughput"
    LATENCY = "latency"
    JITTER = "jitter"
    LOSS = "loss"


_CANONICAL_CODES = {
    ((Metric.THROUGHPUT, 1.0),): 1,
    ((Metric.LATENCY, -1.0),): 2,
    ((Metric.JITTER, -1.0),): 3,
    ((Metric.LOSS, -1.0),): 4,
}


@dataclass(frozen=True)
class Objective:
    """Weighted sum of normalized metrics, always to be maximized.

    A metric to minimize gets a negative weight.
    """

    terms: tuple

    def __post_init__(self):
        if not self.terms:
            raise ValueError("an objective needs at least one term")
        norm = tuple(sorted(((Metric(m), float(w)) for m, w in self.terms),
                            key=lambda t: t[0].value))
        object.__setattr__(self, "terms", norm)

    @property
    def code(self) -> int:
        """Stable small integer identifying this objective."""
        known = _CANONICAL_CODES.get(self.terms)
        if known is not None:
            return known
        return 5 + zlib.crc32(self.describe().encode()) % 16

    def describe(self) -> str:
        return "+".join(f"{w:g}*{m.value}" for m, w in self.terms)

    @classmethod
    def parse(cls, text: str) -> "Objective":
        """``"throughput"``, ``"-latency"``, ``"1*throughput+-0.5*latency"``..."""
        shortcuts = {"throughput": MAX_THROUGHPUT, "latency": MIN_LATENCY,
                     "jitter": MIN_JITTER, "loss": MIN_LOSS}
        text = text.strip()
        if text in shortcuts:
            return shortcuts[text]
        terms = []
        for part in text.split("+"):
            part = part.strip()
            if "*" in part:
                w, m = part.split("*")
                terms.append((Metric(m.strip()), float(w)))
            elif part.startswith("-"):
                terms.append((Metric(part[1:]), -1.0))
            else:
                terms.append((Metric(part), 1.0))
        return cls(tuple(terms))


MAX_THROUGHPUT = Objective(((Metric.THROUGHPUT, 1.0),))
MIN_LATENCY = Objective(((Metric.LATENCY, -1.0),))
MIN_JITTER = Objective(((Metric.JITTER, -1.0),))
MIN_LOSS = Objective(((Metric.LOSS, -1.0),))


@dataclass(frozen=True)
class EwmaParams:
    zeta: float = 0.9
    K: int = 10

    def __post_init__(self):
        if not 0.0 < self.zeta < 1.0:
            raise ValueError("zeta must lie in (0, 1)")
        if self.K < 1:
            raise ValueError("K must be >= 1")


def ewma(history, zeta: float, K: int | None = None) -> float:
    """Discounted average of a most-recent-first history.

    Uses ``history[0..K]``; with fewer samples the sums are truncated.
    """
    n = len(history)
    if n == 0:
        raise EmptyHistory("ewma of an empty history")
    if K is not None:
        n = min(n, K + 1)
    num = 0.0
    den = 0.0
    w = 1.0
    for i in range(n):
        num += w * history[i]
        den += w
        w *= zeta
    return num / den


@dataclass(frozen=True)
class SystemState:
    timestamp: float
    cwnd: float
    cwnd_ewma: float
    acked_segments: float
    acked_ewma: float
    bytes_in_flight: float
    in_flight_ewma: float
    rtt: float
    rtt_ewma: float
    throughput: float
    throughput_ewma: float
    objective_code: float

    def to_array(self, dtype=np.float32) -> np.ndarray:
        return np.array(astuple(self), dtype=dtype)

    def as_column(self) -> np.ndarray:
        return self.to_array().reshape(12, 1)

    @classmethod
    def from_values(cls, values) -> "SystemState":
        values = [float(v) for v in values]
        if len(values) != 12:
            raise ValueError(f"a system state has 12 values, got {len(values)}")
        return cls(*values)


STATE_FIELDS = tuple(f.name for f in fields(SystemState))


class FlowHistory:
    """Most-recent-first ring of per-step observations."""

    def __init__(self, K: int = 10):
        self.K = K
        self.cwnd = deque(maxlen=K + 1)
        self.acked = deque(maxlen=K + 1)
        self.in_flight = deque(maxlen=K + 1)
        self.rtt = deque(maxlen=K + 1)
        self.throughput = deque(maxlen=K + 1)
        self.steps = 0

    def push(self, cwnd, acked_segments, in_flight, rtt, throughput) -> None:
        self.cwnd.appendleft(float(cwnd))
        self.acked.appendleft(float(acked_segments))
        self.in_flight.appendleft(float(in_flight))
        self.rtt.appendleft(float(rtt))
        self.throughput.appendleft(float(throughput))
        self.steps += 1


def record_step(flow, step_seconds: float, K: int = 10) -> None:
    """Close the current DRL step for ``flow``: push its counters into the
    history and reset them."""
    hist = getattr(flow, "history", None)
    if hist is None:
        hist = flow.history = FlowHistory(K)
    st = flow.step
    hist.push(flow.cwnd, st.acked_segments, flow.bytes_in_flight,
              flow.srtt or 0.0, st.acked_bytes * 8.0 / step_seconds)


def collect_state(flow, now: int, ewma_params: EwmaParams, objective: Objective) -> SystemState:
    hist = flow.history
    if not hist.steps:
        raise EmptyHistory("flow has no recorded steps")
    z, K = ewma_params.zeta, ewma_params.K
    return SystemState(
        timestamp=(now / NS_PER_S) % 86400.0,
        cwnd=hist.cwnd[0],
        cwnd_ewma=ewma(hist.cwnd, z, K),
        acked_segments=hist.acked[0],
        acked_ewma=ewma(hist.acked, z, K),
        bytes_in_flight=hist.in_flight[0],
        in_flight_ewma=ewma(hist.in_flight, z, K),
        rtt=hist.rtt[0],
        rtt_ewma=ewma(hist.rtt, z, K),
        throughput=hist.throughput[0],
        throughput_ewma=ewma(hist.throughput, z, K),
        objective_code=objective.code * 0.1,
    )


@dataclass(frozen=True)
class Normalization:
    """Reference scales that make objective terms dimensionless."""

    ref_bandwidth: float = 2e6  # bit/s
    ref_rtt: float = 0.1  # s


def normalized_metric(metric: Metric, value: float, norm: Normalization) -> float:
    if metric is Metric.THROUGHPUT:
        return value / norm.ref_bandwidth
    if metric in (Metric.LATENCY, Metric.JITTER):
        return value / norm.ref_rtt
    return value


def objective_value(step_metrics, objective: Objective, norm: Normalization = Normalization()) -> float:
    """``step_metrics`` maps metric name (or :class:`Metric`) to its raw value."""
    total = 0.0
    for metric, weight in objective.terms:
        raw = step_metrics.get(metric, step_metrics.get(metric.value, 0.0))
        total += weight * normalized_metric(metric, float(raw), norm)
    return total


@dataclass(frozen=True)
class FeatureScales:
    """Fixed scaling of the raw state into O(1) network inputs."""

    mss: float = MSS
    cwnd_max: float = 256 * MSS
    ref_bandwidth: float = 2e6
    ref_rtt: float = 0.1

    def transform(self, values: np.ndarray) -> np.ndarray:
        """``values``: (..., 12) raw states in field order."""
        v = np.asarray(values, dtype=np.float64)
        out = np.empty(v.shape, dtype=np.float32)
        log_span = math.log1p(self.cwnd_max / self.mss)
        out[..., 0] = v[..., 0] / 86400.0
        for i in (1, 2, 5, 6):
            out[..., i] = np.log1p(np.maximum(v[..., i], 0.0) / self.mss) / log_span
        for i in (3, 4):
            out[..., i] = np.log1p(np.maximum(v[..., i], 0.0)) / math.log1p(64.0)
        for i in (7, 8):
            out[..., i] = v[..., i] / self.ref_rtt - 1.0
        for i in (9, 10):
            out[..., i] = v[..., i] / self.ref_bandwidth
        out[..., 11] = v[..., 11]
        return out
