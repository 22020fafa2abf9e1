"""The evaluation families: objectives, updating interval, robustness, FRM,
fairness and loss-based baselines."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from ..simcore import WIRE_BYTES
from .config import ExperimentConfig, FlowConfig
from .experiment import run_experiment
from .metrics import MetricsReport, adaptation_steps

DEFAULT_INTERVALS = (1, 10, 100, 500, 1000)
ROBUSTNESS_MBPS = (2.0, 1.0, 4.0, 1.0)
FRM_TRANSITIONS = {"latency-throughput": ("-latency", "throughput"),
                   "jitter-latency": ("-jitter", "-latency")}


def with_flows(base: ExperimentConfig, flows, **changes) -> ExperimentConfig:
    return dataclasses.replace(base, flows=[dataclasses.replace(f) for f in flows], **changes)


def uniform_flows(cc: str, objective: str, n: int = 3, fixed_cwnd_mss=None, **flow_kw):
    return [FlowConfig(cc=cc, objective=objective, fixed_cwnd_mss=fixed_cwnd_mss, **flow_kw)
            for _ in range(n)]


def scenario_objective(base: ExperimentConfig, objective: str = "throughput", cc: str = "asc_rl",
                       n_flows: int = 3) -> MetricsReport:
    return run_experiment(with_flows(base, uniform_flows(cc, objective, n_flows)))


def scenario_interval_sweep(base: ExperimentConfig, intervals=DEFAULT_INTERVALS,
                            objective: str = "throughput", n_flows: int = 3) -> dict:
    flows = uniform_flows("asc_rl", objective, n_flows)
    return {k: run_experiment(with_flows(base, flows, updating_interval=k)) for k in intervals}


def phase_stats(report: MetricsReport, phase_steps: int, frac: float = 0.8, window: int = 20):
    """Per-phase utilization and steps to reach ``frac`` of the phase capacity."""
    agg = report.aggregate_throughput()
    out = []
    for k, start in enumerate(range(0, report.steps, phase_steps)):
        end = min(start + phase_steps, report.steps)
        sl = slice(start, end)
        out.append({"phase": k, "start": start, "capacity_bps": float(report.capacity[start]),
                    "utilization": report.utilization(sl),
                    "adaptation_steps": adaptation_steps(agg, report.capacity, start, frac, window, end)})
    return out


def scenario_robustness(base: ExperimentConfig, cc: str = "asc_rl", phase_steps: int = 10_000,
                        mbps=ROBUSTNESS_MBPS, n_flows: int = 3, fixed_cwnd_mss=None,
                        **flow_kw) -> MetricsReport:
    schedule = [(k * phase_steps, int(m * 1e6)) for k, m in enumerate(mbps)]
    cfg = with_flows(base, uniform_flows(cc, "throughput", n_flows, fixed_cwnd_mss, **flow_kw),
                     total_steps=phase_steps * len(mbps), bandwidth_schedule=schedule)
    rep = run_experiment(cfg)
    rep.extra["phases"] = phase_stats(rep, phase_steps)
    return rep


def frm_config(base: ExperimentConfig, source: str, target: str, mode: str,
               transition_step: int = 10_000, window: int = 10_000) -> ExperimentConfig:
    """Flow 1 already pursues ``target``; flow 2 switches ``source`` -> ``target``
    at ``transition_step``; flow 3 stays on ``source``."""
    flows = [FlowConfig(objective=target), FlowConfig(objective=source), FlowConfig(objective=source)]
    return with_flows(base, flows, total_steps=transition_step + window,
                      objective_transitions=[(transition_step, 2, target, mode)])


def objective_metric(report: MetricsReport, flow: int, objective: str, sl: slice) -> float:
    """Post-transition score in natural units; higher is better for every objective."""
    if "throughput" in objective:
        return float(report.throughput[sl, flow].mean())
    if "jitter" in objective:
        return -report.mean_jitter(sl, [flow])
    return -report.mean_srtt(sl, [flow])


def scenario_frm(base: ExperimentConfig, transition: str = "latency-throughput",
                 transition_step: int = 10_000, window: int = 10_000) -> dict:
    source, target = FRM_TRANSITIONS[transition]
    out = {}
    for mode in ("frm", "scratch"):
        rep = run_experiment(frm_config(base, source, target, mode, transition_step, window))
        sl = slice(transition_step, transition_step + window)
        rep.extra["post_metric"] = objective_metric(rep, 1, target, sl)
        out[mode] = rep
    f, s = out["frm"].extra["post_metric"], out["scratch"].extra["post_metric"]
    out["margin"] = (f - s) / abs(s) if s else math.nan
    return out


def scenario_fairness(base: ExperimentConfig, objectives=("throughput", "-latency"),
                      n_flows: int = 3, last: int = 10_000) -> dict:
    out = {}
    for obj in objectives:
        rep = scenario_objective(base, obj, "asc_rl", n_flows)
        rep.extra["jain_last"] = rep.jain(rep.window(last=last))
        out[obj] = rep
    return out


def scenario_baseline(base: ExperimentConfig, ccs=("newreno", "cubic"), n_flows: int = 3) -> dict:
    return {cc: scenario_objective(base, "throughput", cc, n_flows) for cc in ccs}


def fixed_phase_expectation(cwnd_mss: float, n_flows: int, rtt_s: float, capacity_bps: float) -> float:
    """Closed-form wire-rate utilization of fixed windows below the queue limit."""
    rate = n_flows * cwnd_mss * WIRE_BYTES * 8 / rtt_s
    return min(rate, capacity_bps) / capacity_bps


def aggregate(values) -> dict:
    x = np.asarray(values, dtype=np.float64)
    return {"mean": float(x.mean()), "min": float(x.min()), "max": float(x.max())}
