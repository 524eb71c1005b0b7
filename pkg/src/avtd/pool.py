"""Online model selection over a pool of agents sharing one replay buffer.

Every environment step one agent acts.  With probability ``epsilon`` it is a
uniformly random pool member, otherwise the member with the lowest selection
metric (validation TD error by default).  All members then update on the
shared buffer.  Every ``heldout_every`` training episodes one extra episode is
collected with the same selection rule and stored only in the held-out
buffer, which is what validation TD is measured on.

Agent indices are 0-based.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import metrics as M
from .envs import Env
from .regularizers import reset_due
from .replay import HeldoutBuffer, ReplayBuffer, Transition
from .sac import SacAgent, SacConfig

Selection = Literal["valid_td", "train_td", "q_gap", "uniform"]
SELECTIONS = ("valid_td", "train_td", "q_gap", "uniform")


class Streams:
    """Named, independent RNG streams derived from one seed.

    Agent ``i`` always gets the same stream regardless of pool size, so a
    single-agent pool replays a standalone run exactly.
    """

    NAMES = ("env", "explore", "act", "select", "eval", "metric")

    def __init__(self, seed: int):
        self.seed = seed
        for i, name in enumerate(self.NAMES):
            setattr(self, name, np.random.default_rng([seed, i]))

    def agent(self, i: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 100 + i])


class AgentPool:
    def __init__(self, agents: Sequence[SacAgent], buffer: ReplayBuffer, heldout: HeldoutBuffer,
                 selection: Selection = "valid_td", epsilon: float = 0.1, names: Sequence[str] | None = None,
                 metric_interval: int = 1, metric_sample: int = 1000):
        if len(agents) < 1:
            raise ValueError("a pool needs at least one agent")
        if selection not in SELECTIONS:
            raise ValueError(f"unknown selection metric {selection!r}; expected one of {SELECTIONS}")
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        base = agents[0].config
        for a in agents[1:]:
            if a.config.with_(reg=base.reg) != base:
                raise ValueError("pool members may differ only in their regularizer")
        self.agents = list(agents)
        self.names = list(names) if names is not None else [a.config.reg.name for a in agents]
        self.buffer = buffer
        self.heldout = heldout
        self.selection = selection
        self.epsilon = epsilon
        self.metric_interval = max(1, int(metric_interval))
        self.metric_sample = metric_sample
        self.selection_counts = np.zeros(len(agents), dtype=np.int64)
        self.greedy_counts = np.zeros(len(agents), dtype=np.int64)
        self.episodes = 0
        self.current = 0
        self._cache: np.ndarray | None = None
        self._cache_age = math.inf

    def __len__(self) -> int:
        return len(self.agents)

    @property
    def config(self) -> SacConfig:
        return self.agents[0].config

    def compute_metrics(self, rng: np.random.Generator, which: Selection | None = None) -> np.ndarray | None:
        """Per-agent metric values, or None when the metric is undefined yet."""
        which = which or self.selection
        if which == "uniform":
            return None
        if which == "valid_td" and len(self.heldout) == 0:
            return None
        if which in ("train_td", "q_gap") and len(self.buffer) == 0:
            return None
        # common random numbers across members
        key = int(rng.integers(2**63))
        vals = []
        for a in self.agents:
            r = np.random.default_rng(key)
            if which == "valid_td":
                vals.append(M.validation_td(a, self.heldout, r))
            elif which == "train_td":
                vals.append(M.train_td(a, self.buffer, r, self.metric_sample))
            else:
                vals.append(M.q_gap(a, self.buffer, self.metric_sample, r))
        return np.array(vals)

    def selection_values(self, rng: np.random.Generator) -> np.ndarray | None:
        """Cached metric values, refreshed every ``metric_interval`` calls."""
        if self._cache is None or self._cache_age >= self.metric_interval:
            self._cache = self.compute_metrics(rng)
            self._cache_age = 0
        self._cache_age += 1
        return self._cache

    def invalidate(self):
        self._cache = None

    def greedy_index(self, rng: np.random.Generator) -> int:
        vals = self.compute_metrics(rng) if self.selection != "uniform" else None
        return 0 if vals is None else int(np.argmin(vals))


def epsilon_greedy(values, epsilon: float, rng: np.random.Generator) -> tuple[int, bool]:
    """Index chosen by epsilon-greedy argmin and whether it was the greedy pick.

    Ties go to the lowest index.
    """
    k = len(values)
    if k == 1:
        return 0, True
    if rng.random() < epsilon:
        return int(rng.integers(k)), False
    return int(np.argmin(values)), True


def select_agent(pool: AgentPool, rng: np.random.Generator, values=None) -> int:
    """Pick the acting agent.

    ``uniform`` ignores metrics.  Metric modes fall back to a uniform draw
    while the metric is undefined (e.g. before any held-out data exists).
    """
    k = len(pool)
    if k == 1:
        return 0
    if pool.selection == "uniform":
        return int(rng.integers(k))
    if values is None:
        values = pool.selection_values(rng)
    if values is None:
        return int(rng.integers(k))
    j, greedy = epsilon_greedy(values, pool.epsilon, rng)
    if greedy:
        pool.greedy_counts[j] += 1
    return j


@dataclass
class LoopConfig:
    eval_interval: int = M.LOG_INTERVAL
    eval_trials: int = 10
    heldout_every: int = 10          # training episodes between held-out episodes; 0 disables
    count_heldout_steps: bool = True
    update_during_heldout: bool = False
    mc_traj: int = 10
    q_gap_samples: int = 1000
    train_td_samples: int | None = 10_000
    log_members: bool = True
    workers: int = 1


class AvtdRunner:
    """Drives a pool through environment steps and records logs and events."""

    def __init__(self, pool: AgentPool, env: Env, streams: Streams, loop: LoopConfig | None = None,
                 method: str = "avtd", seed: int | None = None, eval_env: Env | None = None):
        self.pool = pool
        self.env = env
        self.eval_env = eval_env if eval_env is not None else Env(env.spec)
        self.streams = streams
        self.loop = loop or LoopConfig()
        self.method = method
        self.seed = streams.seed if seed is None else seed
        self.log = M.MetricLog()
        self.events: list[dict] = []
        self.step = 0              # global environment steps, held-out included when counted
        self.train_steps = 0
        self.heldout_steps = 0
        self.train_episodes = 0
        self.obs = None
        self.episode_agent = 0
        self._episode_counts = np.zeros(len(pool), dtype=np.int64)
        self._executor = ThreadPoolExecutor(self.loop.workers) if self.loop.workers > 1 else None

    # -------------------------------------------------------------- acting

    @property
    def warm(self) -> bool:
        return self.step >= self.pool.config.warmup_steps

    def _begin_episode(self):
        self.obs = self.env.reset(self.streams.env)
        if self.pool.selection == "uniform" and len(self.pool) > 1:
            self.episode_agent = int(self.streams.select.integers(len(self.pool)))
        self._episode_counts[:] = 0

    def _choose(self) -> int:
        if self.pool.selection == "uniform":
            return self.episode_agent
        return select_agent(self.pool, self.streams.select)

    def _action(self, obs):
        if not self.warm:
            return self.streams.explore.uniform(-1.0, 1.0, self.env.action_dim), None
        j = self._choose()
        self.pool.selection_counts[j] += 1
        self._episode_counts[j] += 1
        return self.pool.agents[j].act(obs, self.streams.act), j

    def _update_all(self):
        agents = self.pool.agents
        if self._executor is None:
            for a in agents:
                a.train_step(self.pool.buffer)
        else:
            list(self._executor.map(lambda a: a.train_step(self.pool.buffer), agents))

    def _after_step(self):
        self.step += 1
        for i, a in enumerate(self.pool.agents):
            if reset_due(a.config.reg, self.step):
                a.reset()
                self.events.append({"event": "reset", "step": self.step, "agent": i, "name": self.pool.names[i]})
        if self.step % self.loop.eval_interval == 0:
            self.evaluate()

    def env_step(self, total_steps: int):
        """One training environment step; returns True when the episode ended."""
        if self.obs is None:
            self._begin_episode()
        a, j = self._action(self.obs)
        nxt, r, terminated, truncated = self.env.step(a)
        self.pool.buffer.append(Transition(self.obs, a, r, nxt, terminated, truncated))
        self.obs = nxt
        self.train_steps += 1
        if self.warm:
            self._update_all()
        self._after_step()
        done = terminated or truncated
        if done:
            self._end_episode()
        return done

    def _end_episode(self):
        self.train_episodes += 1
        self.pool.episodes += 1
        if len(self.pool) > 1:
            self.events.append({"event": "selection", "episode": self.train_episodes, "step": self.step,
                                "counts": self._episode_counts.tolist()})
        self.obs = None

    def heldout_collect(self, total_steps: int | None = None):
        """Collect one episode into the held-out buffer only."""
        obs = self.env.reset(self.streams.env)
        if self.pool.selection == "uniform" and len(self.pool) > 1:
            self.episode_agent = int(self.streams.select.integers(len(self.pool)))
        n = 0
        while True:
            if total_steps is not None and self.loop.count_heldout_steps and self.step >= total_steps:
                break
            a, _ = self._action(obs)
            nxt, r, terminated, truncated = self.env.step(a)
            self.pool.heldout.append(Transition(obs, a, r, nxt, terminated, truncated))
            self.pool.invalidate()
            obs = nxt
            n += 1
            self.heldout_steps += 1
            if self.loop.update_during_heldout and self.warm:
                self._update_all()
            if self.loop.count_heldout_steps:
                self._after_step()
            if terminated or truncated:
                break
        self.events.append({"event": "heldout", "step": self.step, "transitions": n,
                            "heldout_size": len(self.pool.heldout)})

    # -------------------------------------------------------------- evaluation

    def _member_record(self, i: int, rng_key: int, with_return: bool, with_mc: bool) -> dict:
        a = self.pool.agents[i]
        cfg = a.config
        rec = {}
        if with_return:
            rec["return"] = M.evaluate_return(a, self.eval_env, self.loop.eval_trials,
                                              np.random.default_rng([rng_key, 0]))
        buf = self.pool.buffer
        if len(buf):
            rec["train_td"] = M.train_td(a, buf, np.random.default_rng([rng_key, 1]), self.loop.train_td_samples)
            rec["q_gap"] = M.q_gap(a, buf, self.loop.q_gap_samples, np.random.default_rng([rng_key, 2]))
        if len(self.pool.heldout):
            rec["valid_td"] = M.validation_td(a, self.pool.heldout, np.random.default_rng([rng_key, 3]))
        if with_mc and self.loop.mc_traj:
            rec["mc_bias"] = M.mc_bias(a, self.eval_env, cfg, self.loop.mc_traj, np.random.default_rng([rng_key, 4]))
        return rec

    def evaluate(self):
        pool = self.pool
        key = int(self.streams.metric.integers(2**63))
        if pool.selection == "uniform" and len(pool) > 1:
            picks = self.streams.eval.integers(len(pool), size=self.loop.eval_trials)
            ret = float(np.mean([M.evaluate_return(pool.agents[j], self.eval_env, 1, self.streams.eval)
                                 for j in picks]))
            greedy = None
            rec = {"return": ret}
        else:
            greedy = pool.greedy_index(np.random.default_rng([key, 9]))
            rec = self._member_record(greedy, key, True, True)
        self.log.add(self.method, self.seed, self.step, **rec)
        if len(pool) > 1 and self.loop.log_members:
            for i, name in enumerate(pool.names):
                self.log.add(f"{self.method}/{i}:{name}", self.seed, self.step,
                             **self._member_record(i, key + i + 1, True, False))
        self.events.append({"event": "evaluation", "step": self.step, "return": rec["return"],
                            "greedy": greedy, "train_steps": self.train_steps,
                            "heldout_steps": self.heldout_steps})

    # -------------------------------------------------------------- main loop

    def run(self, total_steps: int) -> M.MetricLog:
        while self.step < total_steps:
            done = self.env_step(total_steps)
            if done and self.loop.heldout_every and self.train_episodes % self.loop.heldout_every == 0:
                if not self.loop.count_heldout_steps or self.step < total_steps:
                    self.heldout_collect(total_steps)
        if self._executor is not None:
            self._executor.shutdown()
        return self.log


def make_pool(obs_dim: int, act_dim: int, config: SacConfig, regs, streams: Streams,
              selection: Selection = "valid_td", epsilon: float = 0.1, names=None,
              metric_interval: int = 1, capacity: int | None = None) -> AgentPool:
    agents = [SacAgent(obs_dim, act_dim, config.with_(reg=r), streams.agent(i)) for i, r in enumerate(regs)]
    kw = {} if capacity is None else {"capacity": capacity}
    return AgentPool(agents, ReplayBuffer(obs_dim, act_dim, **kw), HeldoutBuffer(obs_dim, act_dim),
                     selection, epsilon, names, metric_interval)


def run_avtd(pool: AgentPool, env: Env, total_steps: int, streams: Streams,
             loop: LoopConfig | None = None, method: str = "avtd") -> AvtdRunner:
    """Train the pool for ``total_steps`` environment steps; the runner holds logs and events."""
    runner = AvtdRunner(pool, env, streams, loop, method)
    runner.run(total_steps)
    return runner
