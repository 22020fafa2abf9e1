"""Sign-valued reward with a fairness penalty and a dead-zone on objective changes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class RewardParams:
    alpha: float = 0.5
    c_tau: float = 0.1
    c_o: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.c_tau < 0 or self.c_o < 0:
            raise ValueError("tolerances must be non-negative")


@dataclass(frozen=True)
class RewardInputs:
    tau_ewma_self: float
    tau_ewma_others: tuple = field(default_factory=tuple)
    o_latest: float = 0.0
    o_ewma: float = 0.0

    def __post_init__(self):
        taus = (self.tau_ewma_self, *self.tau_ewma_others)
        if any(not math.isfinite(t) or t < 0 for t in taus):
            raise ValueError("throughput averages must be finite and non-negative")
        object.__setattr__(self, "tau_ewma_others", tuple(self.tau_ewma_others))


def fairness_term(tau_self: float, tau_others, c_tau: float) -> float:
    if not tau_others:
        return 0.0
    worst = max(abs(tau_self - t) for t in tau_others)
    return min(c_tau - worst, 0.0)


def buffer_lambda(x: float, c_o: float) -> float:
    if x > c_o:
        return x - c_o
    if x < -c_o:
        return x + c_o
    return 0.0


def score(inputs: RewardInputs, params: RewardParams) -> float:
    fair = fairness_term(inputs.tau_ewma_self, inputs.tau_ewma_others, params.c_tau)
    gain = buffer_lambda(inputs.o_latest - inputs.o_ewma, params.c_o)
    return params.alpha * fair + (1.0 - params.alpha) * gain


def reward(s_i: float) -> int:
    if not math.isfinite(s_i):
        raise ValueError("score must be finite")
    if s_i > 0:
        return 1
    if s_i < 0:
        return -1
    return 0


def compute_reward(inputs: RewardInputs, params: RewardParams) -> int:
    return reward(score(inputs, params))
