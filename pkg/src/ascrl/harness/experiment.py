"""Wires simulator, flows, CC-clients and the CC-server into one run."""

from __future__ import annotations

import math

import numpy as np

from .. import ccproto
from ..ccserver import CCServer, ServerConfig, TransitionMode
from ..featurize import EwmaParams, FeatureScales, Normalization, Objective, collect_state, record_step
from ..reward import RewardParams
from ..sac import SacParams
from ..simcore import MSS, NS_PER_S, Engine, EventKind, EventTrace, Network
from ..transport import CCKind, Flow, AppTrafficSpec, connect, set_cwnd
from .client import CCClient
from .config import ExperimentConfig
from .metrics import MetricsReport

_CC_NAMES = {"asc_rl": CCKind.ASC_RL, "ascrl": CCKind.ASC_RL, "newreno": CCKind.NEWRENO,
             "cubic": CCKind.CUBIC, "fixed": CCKind.FIXED}


def cc_kind(name: str) -> CCKind:
    try:
        return _CC_NAMES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown congestion control {name!r}") from None


def server_config(cfg: ExperimentConfig) -> ServerConfig:
    bw = cfg.bottleneck.bandwidth
    return ServerConfig(sac=SacParams(**cfg.sac), reward=RewardParams(**cfg.reward),
                        ewma=EwmaParams(**cfg.ewma), norm=Normalization(ref_bandwidth=bw),
                        scales=FeatureScales(ref_bandwidth=bw), **cfg.server)


class Experiment:
    def __init__(self, cfg: ExperimentConfig, server: CCServer | None = None):
        self.cfg = cfg
        self.engine = Engine(record_trace=cfg.record_trace)
        self.topology = cfg.build_topology()
        self.net = Network(self.topology, self.engine)
        self.server = server or CCServer(server_config(cfg), seed=cfg.seed)
        scfg = self.server.config
        self.ewma = scfg.ewma
        self.client = CCClient(scfg.scales)
        self.step_ns = cfg.step_ns
        self.step_s = self.step_ns / NS_PER_S
        self.trace = EventTrace()
        self.flows: list[Flow] = []
        self.objectives: dict[int, Objective] = {}
        self._sent = {}
        self._report_pending = set()
        self.reports = 0
        self._build_flows()
        n, T = len(self.flows), cfg.total_steps
        self.tput = np.zeros((T, n))
        self.srtt = np.full((T, n), np.nan)
        self.jit = np.full((T, n), np.nan)
        self.loss = np.zeros((T, n))
        self.cwnd = np.zeros((T, n))
        self.capacity = np.zeros(T)
        self._bw = cfg.bottleneck.bandwidth
        self._schedule = sorted(cfg.bandwidth_schedule)
        self._transitions = sorted(cfg.objective_transitions, key=lambda t: (t[0], t[1]))
        self.applied_transitions = []

    def _build_flows(self):
        cfg = self.cfg
        senders, receivers = self.topology.senders, self.topology.receivers
        if len(cfg.flows) > min(len(senders), len(receivers)):
            raise ValueError(f"{len(cfg.flows)} flows but topology has {len(senders)} sender hosts")
        for i, fc in enumerate(cfg.flows):
            kind = cc_kind(fc.cc)
            app_id = fc.app_id if fc.app_id is not None else i + 1
            objective = fc.objective_value()
            traffic = AppTrafficSpec(fc.on_duration, fc.off_duration, objective, cfg.flow_start_ns(i))
            cwnd = None
            if kind is CCKind.FIXED:
                if fc.fixed_cwnd_mss is None:
                    raise ValueError("fixed flows need fixed_cwnd_mss")
                cwnd = int(round(fc.fixed_cwnd_mss * MSS))
            flow = Flow(i, app_id, senders[i], receivers[i], kind, traffic, cwnd=cwnd)
            connect(flow, self.net)
            self.flows.append(flow)
            self.objectives[app_id] = objective
            if kind is CCKind.ASC_RL:
                bundle = self.server.register_app(app_id, objective)
                self.client.install(app_id, bundle.snapshot, bundle.version)
                self._sent[app_id] = 0
                flow.sent_listener = self._on_sent

    # ------------------------------------------------------------ reporting
    def _on_sent(self, flow: Flow) -> None:
        app = flow.app_id
        self._sent[app] += 1
        if self._sent[app] >= self.cfg.updating_interval and app not in self._report_pending:
            self._sent[app] = 0
            self._report_pending.add(app)
            self.engine.schedule(self.engine.now, EventKind.STATE_REPORT_DUE, self._report, flow,
                                 flow.flow_id)

    def _report(self, flow: Flow) -> None:
        app = flow.app_id
        self._report_pending.discard(app)
        hist = getattr(flow, "history", None)
        if hist is None or not hist.steps or app not in self.server:
            return
        state = collect_state(flow, self.engine.now, self.ewma, self.objectives[app])
        reply = self.server.handle_batch(ccproto.encode_batch([(app, state)]))
        for msg in ccproto.decode_model_updates(reply):
            self.client.install(msg.app_id, msg.snapshot)
        self.reports += 1

    # ------------------------------------------------------------ control
    def _apply_controls(self, step: int) -> None:
        while self._schedule and self._schedule[0][0] <= step:
            _, bw = self._schedule.pop(0)
            self._bw = int(bw)
            self.net.set_bottleneck_bandwidth(self._bw)
        while self._transitions and self._transitions[0][0] <= step:
            s, app, obj, mode = self._transitions.pop(0)
            objective = obj if isinstance(obj, Objective) else Objective.parse(obj)
            bundle = self.server.change_objective(app, objective, TransitionMode(mode))
            rec = self.server.app(app)
            self.applied_transitions.append({"step": s, "app_id": app, "objective": objective.describe(),
                                             "mode": TransitionMode(mode).value,
                                             "cloned_from": rec.cloned_from})
            self.objectives[app] = objective
            self.client.install(app, bundle.snapshot, bundle.version)
            for f in self.flows:
                if f.app_id == app:
                    f.traffic.objective = objective

    def _on_step(self, k: int) -> None:
        """End of step ``k - 1``; decisions for step ``k``."""
        now = self.engine.now
        i = k - 1
        step_s = self.step_s
        for j, f in enumerate(self.flows):
            record_step(f, step_s, self.ewma.K)
            st = f.step
            self.tput[i, j] = st.received_bytes * 8.0 / step_s
            if f.srtt is not None:
                self.srtt[i, j] = f.srtt
            if st.jitter_n:
                self.jit[i, j] = st.jitter_sum / st.jitter_n
            self.loss[i, j] = st.losses
            self.cwnd[i, j] = f.cwnd
            st.reset()
        self.capacity[i] = self._bw
        if k >= self.cfg.total_steps:
            return
        self._apply_controls(k)
        for f in self.flows:
            if f.cc_kind is CCKind.ASC_RL and self.client.has_model(f.app_id):
                state = collect_state(f, now, self.ewma, self.objectives[f.app_id])
                set_cwnd(f, self.client.cwnd(f.app_id, state.to_array()))
                f.pump_and_send(now)
        self.engine.schedule(now + self.step_ns, EventKind.DRL_STEP, self._on_step, k + 1)

    # ------------------------------------------------------------ run
    def run(self) -> MetricsReport:
        cfg = self.cfg
        self._apply_controls(0)
        for f in self.flows:
            f.start()
        self.engine.schedule(self.step_ns, EventKind.DRL_STEP, self._on_step, 1)
        self.trace = self.engine.run_until(cfg.total_steps * self.step_ns)
        return self.report()

    def report(self) -> MetricsReport:
        extra = {"reports": self.reports, "transitions": self.applied_transitions,
                 "events": self.engine.events_processed, "drops": self.net.dropped,
                 "timeouts": [f.timeouts for f in self.flows],
                 "max_excess": [f.max_excess for f in self.flows]}
        apps = {}
        for app_id, rec in sorted(self.server.registry.items()):
            r = rec.rewards
            apps[app_id] = {"updates": rec.trained_steps, "reports": rec.reports,
                            "mean_reward": float(np.mean(r)) if r else math.nan,
                            "std": rec.actor.std}
        extra["apps"] = apps
        return MetricsReport(
            flow_ids=[f.flow_id for f in self.flows], app_ids=[f.app_id for f in self.flows],
            cc=[f.cc_kind.value for f in self.flows],
            objectives=[self.cfg.flows[i].objective for i in range(len(self.flows))],
            step_seconds=self.step_s, throughput=self.tput, srtt=self.srtt, jitter=self.jit,
            losses=self.loss, cwnd=self.cwnd, capacity=self.capacity,
            base_rtt=[self.topology.base_rtt(f.src, f.dst) / NS_PER_S for f in self.flows],
            seed=self.cfg.seed, extra=extra)


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    return Experiment(cfg).run()
