"""Experiment configuration and its YAML form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from ..featurize import EwmaParams, Objective
from ..reward import RewardParams
from ..sac import SacParams
from ..simcore import LinkSpec, TopologyKind, build_topology, millis, seconds


@dataclass
class FlowConfig:
    cc: str = "asc_rl"
    objective: str = "throughput"
    on_duration: float = 5.0
    off_duration: float = 1.0
    start: float | None = None  # seconds; None = staggered by index
    fixed_cwnd_mss: float | None = None
    app_id: int | None = None

    def objective_value(self) -> Objective:
        return Objective.parse(self.objective)


@dataclass
class LinkConfig:
    bandwidth: int
    delay_ms: float
    queue: int = 16

    def spec(self) -> LinkSpec:
        return LinkSpec(int(self.bandwidth), millis(self.delay_ms), int(self.queue))


@dataclass
class ExperimentConfig:
    topology: str = "dumbbell"
    topology_params: dict = field(default_factory=dict)
    bottleneck: LinkConfig = field(default_factory=lambda: LinkConfig(2_000_000, 40.0))
    edge: LinkConfig = field(default_factory=lambda: LinkConfig(10_000_000, 5.0))
    flows: list = field(default_factory=list)
    total_steps: int = 60_000
    step_ms: float = 50.0
    updating_interval: int = 10  # data packets per app between state reports
    seed: int = 0
    stagger: float = 2.0  # seconds between consecutive flow starts
    bandwidth_schedule: list = field(default_factory=list)  # [(step, bits/s)]
    objective_transitions: list = field(default_factory=list)  # [(step, app_id, objective, mode)]
    sac: dict = field(default_factory=dict)
    reward: dict = field(default_factory=dict)
    ewma: dict = field(default_factory=dict)
    server: dict = field(default_factory=dict)
    record_trace: bool = False
    csv_interval_steps: int = 20

    def __post_init__(self):
        if isinstance(self.bottleneck, dict):
            self.bottleneck = LinkConfig(**self.bottleneck)
        if isinstance(self.edge, dict):
            self.edge = LinkConfig(**self.edge)
        self.flows = [FlowConfig(**f) if isinstance(f, dict) else f for f in self.flows]
        self.bandwidth_schedule = [tuple(x) for x in self.bandwidth_schedule]
        self.objective_transitions = [tuple(x) for x in self.objective_transitions]
        self.validate()

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.step_ms <= 0:
            raise ValueError("step_ms must be positive")
        if self.updating_interval < 1:
            raise ValueError("updating_interval must be >= 1 packet")
        steps = [s for s, _ in self.bandwidth_schedule]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("bandwidth_schedule steps must be strictly increasing")
        for s, bw in self.bandwidth_schedule:
            if s < 0 or bw <= 0:
                raise ValueError(f"bad schedule entry ({s}, {bw})")
        for t in self.objective_transitions:
            if len(t) != 4:
                raise ValueError(f"objective transition {t} needs (step, app_id, objective, mode)")
        for f in self.flows:
            f.objective_value()
        SacParams(**self.sac)
        RewardParams(**self.reward)
        EwmaParams(**self.ewma)

    # ------------------------------------------------------------------
    @property
    def step_ns(self) -> int:
        return millis(self.step_ms)

    def build_topology(self):
        n = len(self.flows)
        kind = TopologyKind(self.topology)
        params = dict(self.topology_params)
        b, e = self.bottleneck.spec(), self.edge.spec()
        if kind is TopologyKind.DUMBBELL:
            params.setdefault("n", n)
            return build_topology(kind, bottleneck=b, edge=e, **params)
        if kind is TopologyKind.LEAF_SPINE:
            return build_topology(kind, fabric=b, edge=e, **params)
        if kind is TopologyKind.FAT_TREE:
            return build_topology(kind, core=b, edge=e, **params)
        # custom: nodes/hosts/links given in full
        return build_topology(kind, **params)

    def flow_start_ns(self, index: int) -> int:
        f = self.flows[index]
        return seconds(f.start if f.start is not None else index * self.stagger)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(yaml.safe_load(fh) or {})


def dump_config(cfg: ExperimentConfig, path) -> None:
    d = cfg.to_dict()
    d["bandwidth_schedule"] = [list(x) for x in cfg.bandwidth_schedule]
    d["objective_transitions"] = [list(x) for x in cfg.objective_transitions]
    with open(path, "w") as fh:
        yaml.safe_dump(d, fh, sort_keys=False)
