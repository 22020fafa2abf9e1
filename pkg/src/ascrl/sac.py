"""Soft Actor-Critic over a one-dimensional squashed-Gaussian action.

The actor is the shared convolutional trunk followed by a per-app dense
head that outputs the pre-squash mean; the log standard deviation is a
single learned scalar.  Actions live in [-1, 1] and map to a congestion
window on a logarithmic scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .featurize import FeatureScales
from .simcore import MSS
from .tinynn import Adam, AdamState, Mode, Network, adam_step, mlp
from .transport import CWND_MAX

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
_LOG2 = math.log(2.0)


class EmptyBuffer(RuntimeError):
    pass


@dataclass(frozen=True)
class SacParams:
    gamma: float = 0.99
    lr: float = 1e-4
    polyak_tau: float = 0.005
    entropy_alpha: float = 0.2
    batch_size: int = 64
    buffer_capacity: int = 100_000
    init_log_std: float = -2.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.polyak_tau <= 1.0:
            raise ValueError("polyak_tau must lie in (0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.entropy_alpha < 0:
            raise ValueError("entropy_alpha must be non-negative")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("batch_size and buffer_capacity must be positive")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray
    done: bool = False

    def __post_init__(self):
        if not -1.0 <= self.action <= 1.0:
            raise ValueError(f"action {self.action} outside [-1, 1]")


class ReplayBuffer:
    """Fixed-capacity FIFO ring sampled uniformly with its own RNG."""

    def __init__(self, capacity: int = 100_000, seed: int = 0, state_dim: int = 12):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.next_states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self.ptr = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition) -> None:
        i = self.ptr
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.dones[i] = float(t.done)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if self.size == 0:
            raise EmptyBuffer("replay buffer is empty")
        return self.rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int) -> dict:
        idx = self.sample_indices(batch_size)
        return {"state": self.states[idx], "action": self.actions[idx], "reward": self.rewards[idx],
                "next_state": self.next_states[idx], "done": self.dones[idx]}

    def clear(self) -> None:
        self.ptr = 0
        self.size = 0


# --------------------------------------------------------------------------
# action mapping
# --------------------------------------------------------------------------


def denormalize_action(a, mss: int = MSS, cwnd_max: int = CWND_MAX):
    """[-1, 1] -> cwnd bytes, geometric between 1 MSS and cwnd_max."""
    a = np.clip(a, -1.0, 1.0)
    return mss * np.exp((a + 1.0) / 2.0 * math.log(cwnd_max / mss))


def normalize_cwnd(cwnd, mss: int = MSS, cwnd_max: int = CWND_MAX):
    c = np.clip(cwnd, mss, cwnd_max)
    return 2.0 * np.log(c / mss) / math.log(cwnd_max / mss) - 1.0


# --------------------------------------------------------------------------
# policy
# --------------------------------------------------------------------------


def _log1m_tanh2(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))


class Actor:
    """Central trunk + per-app head + scalar log-std."""

    def __init__(self, central: Network, sub: Network, log_std: float = 0.0,
                 scales: FeatureScales | None = None):
        self.central = central
        self.sub = sub
        self.log_std = np.array([log_std], dtype=np.float32)
        self.scales = scales or FeatureScales()

    def features(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float32)
        if s.ndim == 1:
            s = s[None, :]
        if s.shape[-1] != 12:
            raise ValueError(f"states must have 12 values, got shape {s.shape}")
        return self.scales.transform(s)

    def mean_from_features(self, feats, mode=Mode.INFER, update_stats=True) -> np.ndarray:
        h = self.central.forward(feats[:, None, :], mode, update_stats)
        return self.sub.forward(h, mode, update_stats)[:, 0]

    def mean(self, states, mode=Mode.INFER) -> np.ndarray:
        return self.mean_from_features(self.features(states), mode)

    @property
    def std(self) -> float:
        return float(np.exp(np.clip(self.log_std[0], LOG_STD_MIN, LOG_STD_MAX)))

    def network(self) -> Network:
        """Single inference network (trunk then head) sharing parameter arrays."""
        return Network(self.central.layers + self.sub.layers, (1, 12))


def squashed_log_prob(u, mean, log_std):
    """log density of a = tanh(u) when u ~ N(mean, exp(log_std)^2)."""
    std = np.exp(log_std)
    eps = (u - mean) / std
    return -0.5 * eps * eps - log_std - _HALF_LOG_2PI - _log1m_tanh2(u)


def sample_action(policy: Actor, state, rng, n: int | None = None, return_pre_squash: bool = False):
    """Sample ``a = tanh(mean + std * noise)`` with its log-probability.

    With ``n`` given, draws ``n`` samples at the single ``state``.
    """
    mean = policy.mean(state)
    if n is not None:
        mean = np.full(n, mean[0])
    log_std = float(np.clip(policy.log_std[0], LOG_STD_MIN, LOG_STD_MAX))
    noise = rng.standard_normal(mean.shape)
    u = mean + math.exp(log_std) * noise
    a = np.tanh(u)
    logp = squashed_log_prob(u, mean, log_std)
    if n is None and np.ndim(state) == 1:
        a, logp, u = float(a[0]), float(logp[0]), float(u[0])
    if return_pre_squash:
        return a, logp, u
    return a, logp


def action_log_prob(policy: Actor, state, actions) -> np.ndarray:
    """Log density of given actions in (-1, 1) at ``state``."""
    actions = np.asarray(actions, dtype=np.float64)
    u = np.arctanh(actions)
    mean = float(policy.mean(state)[0])
    log_std = float(np.clip(policy.log_std[0], LOG_STD_MIN, LOG_STD_MAX))
    return squashed_log_prob(u, mean, log_std)


def deterministic_action(policy: Actor, state):
    a = np.tanh(policy.mean(state))
    return float(a[0]) if np.ndim(state) == 1 else a


def critic_input(feats, actions) -> np.ndarray:
    return np.concatenate([feats, np.asarray(actions, dtype=np.float32).reshape(-1, 1)], axis=1)


def critic_value(critic: Network, state, action, scales: FeatureScales | None = None):
    """Q(s, a) for raw 12-value states."""
    scales = scales or FeatureScales()
    s = np.asarray(state, dtype=np.float32)
    single = s.ndim == 1
    feats = scales.transform(s.reshape(-1, 12))
    q = critic.forward(critic_input(feats, np.atleast_1d(action)))[:, 0]
    return float(q[0]) if single else q


def make_critic(rng, hidden: int = 64) -> Network:
    return mlp([13, hidden, hidden, 1], rng)


def cumulative_return(rewards, gamma: float) -> float:
    total, g = 0.0, 1.0
    for r in rewards:
        total += g * r
        g *= gamma
    return total


# --------------------------------------------------------------------------
# learner
# --------------------------------------------------------------------------


class AgentNets:
    """Everything one app trains: head, log-std, twin critics and targets."""

    def __init__(self, actor: Actor, params: SacParams, rng, critics=None):
        self.actor = actor
        self.params = params
        lr = params.lr
        if critics is None:
            critics = (make_critic(rng), make_critic(rng))
        self.q1, self.q2 = critics
        self.q1_targ = self.q1.copy()
        self.q2_targ = self.q2.copy()
        self.sub_opt = Adam(actor.sub, lr=lr)
        self.q1_opt = Adam(self.q1, lr=lr)
        self.q2_opt = Adam(self.q2, lr=lr)
        self.log_std_state = AdamState([actor.log_std])
        self.updates = 0


def polyak(target: Network, online: Network, tau: float) -> None:
    for t, o in zip(target.parameters(), online.parameters()):
        t *= (1.0 - tau)
        t += tau * o


class SacLearner:
    """One learner per server; ``central_opt`` steps the shared trunk."""

    def __init__(self, params: SacParams, central: Network, rng=None, scales: FeatureScales | None = None):
        self.params = params
        self.central = central
        self.central_opt = Adam(central, lr=params.lr)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.scales = scales or FeatureScales()

    def update(self, agent: AgentNets, batch: dict, train_central: bool = True) -> dict:
        p = self.params
        states = np.asarray(batch["state"], dtype=np.float32)
        n = len(states)
        if n == 0:
            raise EmptyBuffer("empty batch")
        actor = agent.actor
        feats = self.scales.transform(states)
        next_feats = self.scales.transform(np.asarray(batch["next_state"], dtype=np.float32))
        actions = np.asarray(batch["action"], dtype=np.float32)
        rewards = np.asarray(batch["reward"], dtype=np.float32)
        dones = np.asarray(batch["done"], dtype=np.float32)
        alpha = p.entropy_alpha
        log_std = float(np.clip(actor.log_std[0], LOG_STD_MIN, LOG_STD_MAX))
        std = math.exp(log_std)

        # critic targets
        mu_next = actor.mean_from_features(next_feats, Mode.INFER)
        u_next = mu_next + std * self.rng.standard_normal(n)
        a_next = np.tanh(u_next)
        logp_next = squashed_log_prob(u_next, mu_next, log_std)
        x_next = critic_input(next_feats, a_next)
        q_next = np.minimum(agent.q1_targ.forward(x_next)[:, 0], agent.q2_targ.forward(x_next)[:, 0])
        y = rewards + p.gamma * (1.0 - dones) * (q_next - alpha * logp_next)

        x = critic_input(feats, actions)
        critic_loss = 0.0
        for q, opt in ((agent.q1, agent.q1_opt), (agent.q2, agent.q2_opt)):
            q.zero_grad()
            pred = q.forward(x)[:, 0]
            err = pred - y
            critic_loss += float(np.mean(err * err))
            q.backward((2.0 / n * err)[:, None].astype(np.float32))
            opt.step()

        # actor
        actor.sub.zero_grad()
        self.central.zero_grad()
        mu = actor.mean_from_features(feats, Mode.TRAIN)
        noise = self.rng.standard_normal(n)
        u = mu + std * noise
        a = np.tanh(u)
        logp = squashed_log_prob(u, mu, log_std)
        xa = critic_input(feats, a)
        q1 = agent.q1.forward(xa)[:, 0]
        dq1 = agent.q1.backward(np.ones((n, 1), dtype=np.float32))[:, -1]
        q2 = agent.q2.forward(xa)[:, 0]
        dq2 = agent.q2.backward(np.ones((n, 1), dtype=np.float32))[:, -1]
        agent.q1.zero_grad()
        agent.q2.zero_grad()
        use1 = q1 <= q2
        qmin = np.where(use1, q1, q2)
        dq_da = np.where(use1, dq1, dq2)
        actor_loss = float(np.mean(alpha * logp - qmin))
        d_u = (alpha * 2.0 * a - dq_da * (1.0 - a * a)) / n
        d_log_std = float(np.sum(d_u * std * noise)) - alpha
        g_h = actor.sub.backward(d_u[:, None].astype(np.float32))
        agent.sub_opt.step()
        if train_central:
            self.central.backward(g_h)
            self.central_opt.step()
        adam_step([actor.log_std], [np.array([d_log_std], dtype=np.float32)], agent.log_std_state,
                  p.lr)
        np.clip(actor.log_std, LOG_STD_MIN, LOG_STD_MAX, out=actor.log_std)

        polyak(agent.q1_targ, agent.q1, p.polyak_tau)
        polyak(agent.q2_targ, agent.q2, p.polyak_tau)
        agent.updates += 1
        return {"critic_loss": critic_loss / 2.0, "actor_loss": actor_loss}
