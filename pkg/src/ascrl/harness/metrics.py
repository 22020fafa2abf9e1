"""Summary statistics over per-step, per-flow measurements."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..simcore import MSS, WIRE_BYTES


class AllZero(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


def jain_index(values) -> float:
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("jain_index needs at least one value")
    if np.any(x < 0):
        raise ValueError("jain_index needs non-negative values")
    top = float(x.max())
    if top == 0.0:
        raise AllZero("all values are zero")
    x = x / top  # scale-free; avoids under/overflow in the squares
    sq = float(np.sum(x * x))
    return float(np.sum(x)) ** 2 / (x.size * sq)


def jitter_metric(latency_samples) -> float:
    """Mean absolute difference of consecutive latency samples."""
    x = np.asarray(latency_samples, dtype=np.float64)
    if x.size < 2:
        raise TooFewSamples("jitter needs at least two samples")
    return float(np.mean(np.abs(np.diff(x))))


def five_number(values) -> dict:
    x = np.asarray(values, dtype=np.float64)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return {k: math.nan for k in ("min", "q1", "median", "q3", "max")}
    q = np.percentile(x, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))


def cdf_points(values, n_points: int = 21):
    """``(value, fraction <= value)`` at evenly spaced quantiles, 0 to 1."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    x = x[np.isfinite(x)]
    if x.size == 0:
        return []
    probs = np.linspace(0.0, 1.0, n_points)
    vals = np.quantile(x, probs)
    return [(float(v), float(p)) for v, p in zip(vals, probs)]


def goodput_to_wire(bits_per_s):
    """Payload rate -> on-the-wire rate including per-packet headers."""
    return np.asarray(bits_per_s, dtype=np.float64) * (WIRE_BYTES / MSS)


def moving_average(x, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if window <= 1 or x.size == 0:
        return x.copy()
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    n = np.arange(1, x.size + 1)
    lo = np.maximum(n - window, 0)
    out[:] = (c[n] - c[lo]) / (n - lo)
    return out


def convergence_step(series, window: int = 1000, tol: float = 0.10) -> int | None:
    """First step after which the moving average stays within ``tol`` of its final value."""
    ma = moving_average(series, window)
    if ma.size == 0:
        return None
    final = ma[-1]
    band = abs(final) * tol
    outside = np.nonzero(np.abs(ma - final) > band)[0]
    if outside.size == 0:
        return 0
    last = int(outside[-1]) + 1
    return last if last < ma.size else None


def adaptation_steps(aggregate_bps, capacity_bps, change_step: int, frac: float = 0.8,
                     window: int = 20, end: int | None = None) -> int | None:
    """Steps after ``change_step`` until the moving-average wire rate reaches
    ``frac`` of the new capacity; None if it never does before ``end``."""
    end = len(aggregate_bps) if end is None else end
    seg = goodput_to_wire(aggregate_bps[change_step:end])
    ma = moving_average(seg, window)
    target = frac * float(capacity_bps[change_step])
    hit = np.nonzero(ma >= target)[0]
    return int(hit[0]) if hit.size else None


@dataclass
class MetricsReport:
    """Per-step, per-flow arrays plus run-level context."""

    flow_ids: list
    app_ids: list
    cc: list
    objectives: list
    step_seconds: float
    throughput: np.ndarray  # (steps, flows) new payload bits/s arriving at the receiver
    srtt: np.ndarray  # (steps, flows) s, nan before the first sample
    jitter: np.ndarray  # (steps, flows) mean |consecutive rtt diff| in the step, nan if < 2 samples
    losses: np.ndarray  # (steps, flows) loss events
    cwnd: np.ndarray  # (steps, flows) bytes
    capacity: np.ndarray  # (steps,) bottleneck bits/s
    base_rtt: list = field(default_factory=list)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.throughput.shape[0]

    def window(self, last: int | None = None, start: int | None = None, end: int | None = None):
        if last is not None:
            return slice(max(self.steps - last, 0), self.steps)
        return slice(start or 0, self.steps if end is None else end)

    def aggregate_throughput(self) -> np.ndarray:
        return self.throughput.sum(axis=1) if self.throughput.size else np.zeros(self.steps)

    def utilization(self, sl: slice | None = None) -> float:
        sl = sl or slice(None)
        wire = goodput_to_wire(self.aggregate_throughput()[sl])
        return float(wire.sum() / self.capacity[sl].sum())

    def mean_srtt(self, sl: slice | None = None, flows=None) -> float:
        sl = sl or slice(None)
        x = self.srtt[sl] if flows is None else self.srtt[sl][:, flows]
        return float(np.nanmean(x))

    def mean_jitter(self, sl: slice | None = None, flows=None) -> float:
        sl = sl or slice(None)
        x = self.jitter[sl] if flows is None else self.jitter[sl][:, flows]
        return float(np.nanmean(x)) if np.isfinite(x).any() else math.nan

    def flow_means(self, sl: slice | None = None) -> np.ndarray:
        sl = sl or slice(None)
        return self.throughput[sl].mean(axis=0)

    def jain(self, sl: slice | None = None) -> float:
        return jain_index(self.flow_means(sl))
