"""Central CC-server: one shared trunk, one head per application.

Each state report is turned into a reward for the previous action, stored
as a transition, used for one SAC update once the app's buffer is warm,
and answered with a fresh model bundle for the app's CC-client.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import ccproto
from .featurize import (EwmaParams, FeatureScales, Metric, Normalization, Objective, SystemState,
                        ewma, objective_value)
from .reward import RewardInputs, RewardParams, compute_reward
from .sac import (Actor, AgentNets, ReplayBuffer, SacLearner, SacParams,
                  Transition)
from .tinynn import (HEADER_SIZE, Dense, Network, ShapeMismatch, central_network, deserialize,
                     serialize, serialize_layer, sub_network)


class DuplicateApp(KeyError):
    pass


class UnknownApp(KeyError):
    pass


class TransitionMode(str, Enum):
    FRM = "frm"
    SCRATCH = "scratch"


SUB_SHAPES = ((96, 64), (64, 32), (32, 1))


def frm_clone(source: Network, rng, out_scale: float = 1.0) -> Network:
    """Copy a head's hidden layers (incl. batch-norm state) and re-draw its output layer."""
    dense = [l for l in source.layers if isinstance(l, Dense)]
    if tuple(l.weight.shape for l in dense) != SUB_SHAPES:
        raise ShapeMismatch(f"head layout {[l.weight.shape for l in dense]} is not {SUB_SHAPES}")
    clone = source.copy()
    [l for l in clone.layers if isinstance(l, Dense)][-1].reinit(rng, out_scale)
    return clone


@dataclass
class ModelBundle:
    app_id: int
    snapshot: bytes
    n_central_layers: int
    version: int = 0

    def network(self) -> Network:
        return deserialize(self.snapshot, (1, 12))


@dataclass(frozen=True)
class ServerConfig:
    sac: SacParams = field(default_factory=SacParams)
    reward: RewardParams = field(default_factory=RewardParams)
    ewma: EwmaParams = field(default_factory=EwmaParams)
    norm: Normalization = field(default_factory=Normalization)
    scales: FeatureScales = field(default_factory=FeatureScales)
    explore: bool = True
    # update the shared trunk from every app's gradient
    train_central: bool = True
    # FRM also copies the source's critics
    frm_copy_critics: bool = True
    updates_per_report: int = 1
    # which reported fields feed the objective value: "ewma" or "latest"
    objective_source: str = "ewma"
    # scale of the freshly drawn output layer of a head
    head_out_scale: float = 0.1


class AppRecord:
    def __init__(self, app_id: int, objective: Objective, agent: AgentNets, buffer: ReplayBuffer):
        self.app_id = app_id
        self.objective = objective
        self.agent = agent
        self.buffer = buffer
        self.o_hist: deque = deque()
        self.tau_ewma: float | None = None
        self.last_rtt: float | None = None
        self.pending = None  # (state values, action) awaiting its reward
        self.noise = 0.0
        self.reports = 0
        self.version = 0
        self.cloned_from: int | None = None
        self.rewards: list = []

    @property
    def trained_steps(self) -> int:
        return self.agent.updates

    @property
    def actor(self) -> Actor:
        return self.agent.actor


class CCServer:
    def __init__(self, config: ServerConfig | None = None, seed: int = 0):
        self.config = config or ServerConfig()
        self.rng = np.random.default_rng(seed)
        self.central = central_network(self.rng)
        self.learner = SacLearner(self.config.sac, self.central, self.rng, self.config.scales)
        self.registry: dict[int, AppRecord] = {}
        self._seed = seed

    # ---------------------------------------------------------------- registry

    def __contains__(self, app_id):
        return app_id in self.registry

    def app(self, app_id: int) -> AppRecord:
        try:
            return self.registry[app_id]
        except KeyError:
            raise UnknownApp(app_id) from None

    def find_similar(self, objective: Objective, exclude: int | None = None) -> int | None:
        """App with the same objective and the most training; lowest id on ties."""
        best = None
        for app_id in sorted(self.registry):
            rec = self.registry[app_id]
            if app_id == exclude or rec.objective != objective:
                continue
            if best is None or rec.trained_steps > self.registry[best].trained_steps:
                best = app_id
        return best

    def _new_agent(self, objective: Objective, exclude: int | None, use_frm: bool):
        cfg = self.config
        src_id = self.find_similar(objective, exclude) if use_frm else None
        if src_id is None:
            actor = Actor(self.central, sub_network(self.rng, cfg.head_out_scale), cfg.sac.init_log_std, cfg.scales)
            return AgentNets(actor, cfg.sac, self.rng), None
        src = self.registry[src_id].agent
        actor = Actor(self.central, frm_clone(src.actor.sub, self.rng, cfg.head_out_scale), cfg.sac.init_log_std, cfg.scales)
        critics = (src.q1.copy(), src.q2.copy()) if cfg.frm_copy_critics else None
        agent = AgentNets(actor, cfg.sac, self.rng, critics)
        if critics is not None:
            agent.q1_targ = src.q1_targ.copy()
            agent.q2_targ = src.q2_targ.copy()
        return agent, src_id

    def register_app(self, app_id: int, objective: Objective, use_frm: bool = True) -> ModelBundle:
        if app_id in self.registry:
            raise DuplicateApp(app_id)
        agent, src = self._new_agent(objective, None, use_frm)
        buf = ReplayBuffer(self.config.sac.buffer_capacity, seed=self._seed * 7919 + app_id)
        rec = AppRecord(app_id, objective, agent, buf)
        rec.cloned_from = src
        self.registry[app_id] = rec
        return self.export_bundle(app_id)

    def deregister_app(self, app_id: int) -> None:
        self.app(app_id)
        del self.registry[app_id]

    def change_objective(self, app_id: int, objective: Objective,
                         mode: TransitionMode = TransitionMode.FRM) -> ModelBundle:
        """Switch an app's objective.

        FRM clones a similar app's head when one exists and otherwise keeps
        fine-tuning the app's own head; SCRATCH always starts a fresh head.
        Experience gathered under the old objective is discarded.
        """
        rec = self.app(app_id)
        mode = TransitionMode(mode)
        if mode is TransitionMode.FRM:
            src = self.find_similar(objective, exclude=app_id)
            if src is not None:
                rec.agent, rec.cloned_from = self._new_agent(objective, app_id, True)
            else:
                rec.cloned_from = None
        else:
            rec.agent, rec.cloned_from = self._new_agent(objective, app_id, False)
        rec.objective = objective
        rec.buffer.clear()
        rec.o_hist.clear()
        rec.pending = None
        rec.last_rtt = None
        return self.export_bundle(app_id)

    # ------------------------------------------------------------------ reports

    def objective_of(self, rec: AppRecord, state: SystemState) -> float:
        jitter = 0.0 if rec.last_rtt is None else abs(state.rtt - rec.last_rtt)
        if self.config.objective_source == "ewma":
            tput, rtt = state.throughput_ewma, state.rtt_ewma
        else:
            tput, rtt = state.throughput, state.rtt
        metrics = {Metric.THROUGHPUT: tput, Metric.LATENCY: rtt, Metric.JITTER: jitter, Metric.LOSS: 0.0}
        return objective_value(metrics, rec.objective, self.config.norm)

    def on_state_report(self, app_id: int, state: SystemState) -> ModelBundle:
        cfg = self.config
        rec = self.app(app_id)
        values = state.to_array()
        if not np.all(np.isfinite(values)):
            raise ValueError("state report contains non-finite values")
        o = self.objective_of(rec, state)
        rec.o_hist.appendleft(o)
        while len(rec.o_hist) > cfg.ewma.K + 1:
            rec.o_hist.pop()
        o_bar = ewma(rec.o_hist, cfg.ewma.zeta, cfg.ewma.K)
        rec.tau_ewma = max(state.throughput_ewma, 0.0) / cfg.norm.ref_bandwidth
        rec.last_rtt = state.rtt
        rec.reports += 1
        if rec.pending is not None:
            others = tuple(r.tau_ewma for i, r in self.registry.items()
                           if i != app_id and r.tau_ewma is not None)
            r = compute_reward(RewardInputs(rec.tau_ewma, others, o, o_bar), cfg.reward)
            prev_state, prev_action = rec.pending
            rec.buffer.add(Transition(prev_state, prev_action, r, values, False))
            rec.rewards.append(r)
        if len(rec.buffer) >= cfg.sac.batch_size:
            for _ in range(cfg.updates_per_report):
                self.learner.update(rec.agent, rec.buffer.sample(cfg.sac.batch_size), cfg.train_central)
        # next action: the client will act deterministically on the shipped
        # model, so the exploration draw is folded into the output bias
        actor = rec.actor
        mean = float(actor.mean(values)[0])
        rec.noise = float(self.rng.standard_normal()) * actor.std if cfg.explore else 0.0
        rec.pending = (values, float(np.tanh(mean + rec.noise)))
        return self.export_bundle(app_id)

    def export_bundle(self, app_id: int) -> ModelBundle:
        """Snapshot of trunk + head for one app; the trunk bytes are shared."""
        rec = self.app(app_id)
        sub = rec.actor.sub.layers
        last = sub[-1]
        shifted = Dense.__new__(Dense)
        shifted.__dict__.update(last.__dict__)
        shifted.bias = (last.bias + np.float32(rec.noise)).astype(last.bias.dtype)
        layers = self.central.layers + sub[:-1] + [shifted]
        snapshot = serialize(Network(layers))
        rec.version += 1
        return ModelBundle(app_id, snapshot, len(self.central.layers), rec.version)

    def central_bytes(self, bundle: ModelBundle) -> bytes:
        """The trunk portion of a bundle's snapshot."""
        n = HEADER_SIZE + sum(len(serialize_layer(l)) for l in self.central.layers)
        return bundle.snapshot[HEADER_SIZE:n]

    # --------------------------------------------------------------- byte path

    def handle_batch(self, data: bytes) -> bytes:
        """Batch report bytes in, concatenated model updates out."""
        out = []
        for rep in ccproto.decode_batch(data):
            bundle = self.on_state_report(rep.app_id, rep.state)
            out.append(ccproto.encode_model_update(ccproto.ModelUpdateMsg(rep.app_id, bundle.snapshot)))
        return b"".join(out)

    def serve(self, rfile, wfile) -> int:
        """Answer framed batches from ``rfile`` until EOF; returns frames served."""
        served = 0
        while True:
            fr = ccproto.read_frame(rfile)
            if fr is None:
                return served
            kind, payload = fr
            if kind != ccproto.FRAME_BATCH:
                raise ccproto.ProtocolError(f"unexpected frame kind {kind}")
            wfile.write(ccproto.frame(ccproto.FRAME_UPDATES, self.handle_batch(payload)))
            if hasattr(wfile, "flush"):
                wfile.flush()
            served += 1


def mean_reward(rec: AppRecord, last: int | None = None) -> float:
    r = rec.rewards[-last:] if last else rec.rewards
    return float(np.mean(r)) if r else math.nan
