"""Soft Actor-Critic on numpy MLPs.

The actor is a tanh-squashed diagonal Gaussian; there are two critics with
Polyak-averaged targets and a learned temperature.  Regularizers from
``RegularizerConfig`` shape the critics only.  A configurable number of
critic updates (the update-to-data ratio) runs per environment step, with one
actor/temperature update every ``policy_delay`` critic updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .nn import (EVAL, AdamState, ForwardMode, MlpSpec, ParamSet, adamw_step, mlp_backward, mlp_forward,
                 optimizer_step)
from .regularizers import PLAIN, RegularizerConfig, build_critic_spec, build_decay_mask
from .replay import Batch, ReplayBuffer

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


@dataclass(frozen=True)
class SacConfig:
    hidden: tuple[int, ...] = (256, 256)
    discount: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    init_temperature: float = 1.0
    warmup_steps: int = 10_000
    utd: int = 1
    policy_delay: int = 1
    backup: Literal["entropy", "deterministic"] = "entropy"
    target_entropy: float | None = None
    reg: RegularizerConfig = field(default=PLAIN)
    log_std_min: float = -10.0
    log_std_max: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.utd < 1 or self.policy_delay < 1:
            raise ValueError("utd and policy_delay must be >= 1")
        if self.batch_size < 1 or self.warmup_steps < 0:
            raise ValueError("batch_size must be >= 1 and warmup_steps >= 0")
        if self.backup not in ("entropy", "deterministic"):
            raise ValueError(f"unknown backup mode {self.backup!r}")
        if self.init_temperature <= 0 or self.lr <= 0:
            raise ValueError("init_temperature and lr must be positive")
        if not self.hidden:
            raise ValueError("need at least one hidden layer")

    def with_(self, **kw) -> SacConfig:
        return replace(self, **kw)


@dataclass
class TrainStats:
    critic_updates: int = 0
    actor_updates: int = 0
    train_td: float = float("nan")
    actor_loss: float = float("nan")
    alpha: float = float("nan")


def softplus(x):
    return np.logaddexp(0.0, x)


def tanh_log_det(u):
    """``log(1 - tanh(u)^2)`` in the overflow-free softplus form."""
    return 2.0 * (LOG_2 - u - softplus(-2.0 * u))


class SacAgent:
    def __init__(self, obs_dim: int, act_dim: int, config: SacConfig, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.config = config
        self.rng = rng
        self.target_entropy = -float(act_dim) if config.target_entropy is None else config.target_entropy
        self.actor_spec = MlpSpec((obs_dim,) + config.hidden + (2 * act_dim,))
        self.critic_spec = build_critic_spec(config.reg, (obs_dim + act_dim,) + config.hidden + (1,))
        self.n_resets = 0
        self._init_networks()

    def _init_networks(self):
        cfg = self.config
        self.actor = ParamSet.init(self.actor_spec, self.rng)
        self.critics = [ParamSet.init(self.critic_spec, self.rng) for _ in range(2)]
        self.targets = [c.copy() for c in self.critics]
        self.log_alpha = math.log(cfg.init_temperature)
        mask = build_decay_mask(cfg.reg, self.critics[0].layout())
        self.critic_opts = [AdamState.for_params(c.params, cfg.lr, cfg.reg.weight_decay, mask)
                            for c in self.critics]
        self.actor_opt = AdamState.for_params(self.actor.params, cfg.lr)
        self.alpha_opt = AdamState.for_params({"log_alpha": np.zeros(())}, cfg.lr)
        self.critic_update_count = 0
        self.actor_update_count = 0

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    # ------------------------------------------------------------------ policy

    def _policy_head(self, obs, mode=EVAL):
        out, tape = mlp_forward(self.actor_spec, self.actor, obs, mode)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite actor output")
        mu = out[:, :self.act_dim]
        raw = out[:, self.act_dim:]
        log_std = np.clip(raw, self.config.log_std_min, self.config.log_std_max)
        in_range = (raw >= self.config.log_std_min) & (raw <= self.config.log_std_max)
        return mu, log_std, tape, in_range

    def deterministic_actions(self, obs) -> np.ndarray:
        mu, _, _, _ = self._policy_head(np.atleast_2d(obs))
        return np.tanh(mu)

    def sample_actions(self, obs, rng: np.random.Generator):
        """Reparameterized draw; returns ``(actions, log_probs)``."""
        a, logp, _ = self._sample(np.atleast_2d(obs), rng)
        return a, logp

    def _sample(self, obs, rng):
        mu, log_std, tape, in_range = self._policy_head(obs)
        eps = rng.standard_normal(mu.shape)
        std = np.exp(log_std)
        u = mu + std * eps
        t = np.tanh(u)
        logp = np.sum(-0.5 * eps**2 - log_std - 0.5 * LOG_2PI - tanh_log_det(u), axis=1)
        # keep actions strictly inside the box even when tanh rounds to +-1
        a = np.clip(t, -1.0 + 1e-12, 1.0 - 1e-12)
        return a, logp, (tape, eps, std, t, in_range)

    def act(self, obs, rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
        if deterministic:
            return self.deterministic_actions(obs)[0]
        return self.sample_actions(obs, rng if rng is not None else self.rng)[0][0]

    # ------------------------------------------------------------------ critics

    def q_value(self, obs, actions, which: int = 0, target: bool = False, mode: ForwardMode = EVAL):
        net = (self.targets if target else self.critics)[which]
        out, _ = mlp_forward(self.critic_spec, net, np.concatenate([obs, actions], axis=1), mode)
        return out[:, 0]

    def next_action(self, next_obs, rng: np.random.Generator):
        """Backup action and its log-prob (zero in deterministic mode)."""
        if self.config.backup == "deterministic":
            return self.deterministic_actions(next_obs), np.zeros(len(next_obs))
        return self.sample_actions(next_obs, rng)

    def td_targets(self, batch: Batch, rng: np.random.Generator | None = None) -> np.ndarray:
        cfg = self.config
        a2, logp2 = self.next_action(batch.next_obs, rng if rng is not None else self.rng)
        q_next = np.minimum(self.q_value(batch.next_obs, a2, 0, target=True),
                            self.q_value(batch.next_obs, a2, 1, target=True))
        if cfg.backup == "entropy":
            q_next = q_next - self.alpha * logp2
        return batch.reward + cfg.discount * (1.0 - batch.terminated) * q_next

    def critic_update(self, batch: Batch) -> float:
        """One AdamW step on both critics; returns the batch-mean squared TD error of critic 1."""
        y = self.td_targets(batch)
        x = np.concatenate([batch.obs, batch.action], axis=1)
        n = len(batch)
        td = None
        for i, (net, opt) in enumerate(zip(self.critics, self.critic_opts)):
            q, tape = mlp_forward(self.critic_spec, net, x, ForwardMode.train(self.rng))
            err = q[:, 0] - y
            if not np.all(np.isfinite(err)):
                raise FloatingPointError("non-finite critic loss")
            if i == 0:
                td = float(np.mean(err**2))
            grads, _ = mlp_backward(self.critic_spec, net, tape, (2.0 / n) * err[:, None])
            optimizer_step(opt, net, grads)
        noise = self.config.reg.critic_noise
        if noise:
            for net in self.critics:
                for p in net.params.values():
                    p += noise * self.rng.standard_normal(p.shape)
                net.touch()
        self.critic_update_count += 1
        return td

    def actor_and_temperature_update(self, batch: Batch):
        obs = batch.obs
        n = len(obs)
        a, logp, (tape, eps, std, t, in_range) = self._sample(obs, self.rng)
        x = np.concatenate([obs, a], axis=1)
        qs, tapes = [], []
        for net in self.critics:
            q, qtape = mlp_forward(self.critic_spec, net, x, EVAL)
            qs.append(q[:, 0])
            tapes.append(qtape)
        use_first = qs[0] <= qs[1]
        q_min = np.where(use_first, qs[0], qs[1])
        dq_da = np.zeros_like(a)
        for i, net in enumerate(self.critics):
            sel = (use_first if i == 0 else ~use_first).astype(np.float64)[:, None]
            _, gx = mlp_backward(self.critic_spec, net, tapes[i], sel, param_grads=False)
            dq_da += gx[:, self.obs_dim:]
        alpha = self.alpha
        loss = float(np.mean(alpha * logp - q_min))
        # d/du of (alpha * logp - Q(tanh u)); logp depends on u through -log(1 - tanh^2 u)
        d_u = alpha * 2.0 * t - dq_da * (1.0 - t**2)
        d_mu = d_u / n
        d_logstd = (d_u * std * eps - alpha) / n * in_range
        grads, _ = mlp_backward(self.actor_spec, self.actor, tape, np.concatenate([d_mu, d_logstd], axis=1))
        optimizer_step(self.actor_opt, self.actor, grads)

        entropy = -float(np.mean(logp))
        la = {"log_alpha": np.array(self.log_alpha)}
        adamw_step(self.alpha_opt, la, {"log_alpha": np.array(alpha * (entropy - self.target_entropy))})
        self.log_alpha = float(la["log_alpha"])
        self.actor_update_count += 1
        return loss, self.alpha

    def polyak_update(self, tau: float | None = None):
        tau = self.config.tau if tau is None else tau
        for online, target in zip(self.critics, self.targets):
            for k, p in online.params.items():
                t = target.params[k]
                t *= 1.0 - tau
                t += tau * p
            if online.sn_u is not None:
                target.sn_u = online.sn_u.copy()
            target.touch()

    # ------------------------------------------------------------------ schedule

    def train_step(self, buffer: ReplayBuffer) -> TrainStats:
        """One environment step's worth of updates: ``utd`` critic updates with
        Polyak averaging, and an actor update every ``policy_delay`` of them."""
        cfg = self.config
        stats = TrainStats()
        tds = []
        for _ in range(cfg.utd):
            batch = buffer.sample(cfg.batch_size, self.rng)
            tds.append(self.critic_update(batch))
            self.polyak_update()
            stats.critic_updates += 1
            if self.critic_update_count % cfg.policy_delay == 0:
                stats.actor_loss, stats.alpha = self.actor_and_temperature_update(batch)
                stats.actor_updates += 1
        stats.train_td = float(np.mean(tds))
        return stats

    def reset(self):
        """Re-initialize every network, optimizer and the temperature."""
        self._init_networks()
        self.n_resets += 1


def agent_train_step(agent: SacAgent, buffer: ReplayBuffer) -> TrainStats:
    return agent.train_step(buffer)


def agent_reset(agent: SacAgent):
    agent.reset()
