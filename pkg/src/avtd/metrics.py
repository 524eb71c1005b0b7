"""Diagnostics for a trained agent and the rank / score aggregation protocols.

Agent diagnostics evaluate critic 1 in eval mode at ``(s, a)`` and use the
same backup as training (target twins, min over both) for TD targets.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.stats import rankdata

from .replay import Batch, HeldoutBuffer, ReplayBuffer

LOG_INTERVAL = 5000
CSV_COLUMNS = ("method", "seed", "env_step", "return", "train_td", "valid_td", "q_gap", "mc_bias")
METRICS = ("return", "train_td", "valid_td", "q_gap", "mc_bias")

nan = float("nan")


# ---------------------------------------------------------------------- agent diagnostics

def td_errors(agent, batch: Batch, rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-transition squared TD errors of critic 1 (eval mode)."""
    rng = np.random.default_rng(0) if rng is None else rng
    y = agent.td_targets(batch, rng)
    q = agent.q_value(batch.obs, batch.action, 0)
    return (y - q) ** 2


def validation_td(agent, heldout: HeldoutBuffer, rng: np.random.Generator | None = None) -> float:
    if len(heldout) == 0:
        raise ValueError("held-out buffer is empty")
    return float(np.mean(td_errors(agent, heldout.contents(), rng)))


def train_td(agent, buffer: ReplayBuffer, rng: np.random.Generator, sample_size: int | None = None) -> float:
    """TD error on the replay buffer: all of it, or a uniform sample of ``sample_size``."""
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    if sample_size is None or sample_size >= len(buffer):
        batch = buffer.contents()
    else:
        batch = buffer._gather(buffer.sample_indices(sample_size, rng))
    return float(np.mean(td_errors(agent, batch, rng)))


def q_gap_on(agent, obs, data_actions, policy_actions) -> float:
    """Mean critic value at policy actions minus mean at dataset actions."""
    return float(np.mean(agent.q_value(obs, policy_actions, 0)) - np.mean(agent.q_value(obs, data_actions, 0)))


def q_gap(agent, buffer, sample_size: int, rng: np.random.Generator) -> float:
    """Gap between critic values at one fresh policy action per state and at the logged action."""
    if len(buffer) == 0:
        raise ValueError("buffer is empty")
    if isinstance(buffer, Batch):
        batch = buffer[rng.integers(0, len(buffer), size=sample_size)]
    else:
        batch = buffer._gather(buffer.sample_indices(sample_size, rng))
    policy_actions, _ = agent.sample_actions(batch.obs, rng)
    return q_gap_on(agent, batch.obs, batch.action, policy_actions)


def discounted_reward_to_go(rewards, discount: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


def rollout(agent, env, rng: np.random.Generator, deterministic: bool):
    """One episode; returns ``(obs, actions, rewards)`` arrays."""
    obs_l, act_l, rew_l = [], [], []
    obs = env.reset(rng)
    while True:
        a = agent.act(obs, rng, deterministic=deterministic)
        nxt, r, terminated, truncated = env.step(a)
        obs_l.append(obs)
        act_l.append(a)
        rew_l.append(r)
        obs = nxt
        if terminated or truncated:
            break
    return np.array(obs_l), np.array(act_l), np.array(rew_l)


def mc_bias(agent, env, config, n_traj: int = 10, rng: np.random.Generator | None = None,
            deterministic: bool | None = None) -> float:
    """Mean of ``Q1(s, a) - discounted reward-to-go`` over states visited by the policy.

    The policy acts deterministically when the agent uses deterministic backups
    (so the critic estimates that policy's value) and stochastically otherwise.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    if deterministic is None:
        deterministic = config.backup == "deterministic"
    diffs = []
    for _ in range(n_traj):
        obs, act, rew = rollout(agent, env, rng, deterministic)
        q = agent.q_value(obs, act, 0)
        diffs.append(q - discounted_reward_to_go(rew, config.discount))
    return float(np.mean(np.concatenate(diffs)))


def evaluate_return(agent, env, n_trials: int = 10, rng: np.random.Generator | None = None) -> float:
    """Mean undiscounted return of the deterministic policy over ``n_trials`` episodes."""
    rng = np.random.default_rng(0) if rng is None else rng
    return float(np.mean([rollout(agent, env, rng, True)[2].sum() for _ in range(n_trials)]))


# ---------------------------------------------------------------------- logs

@dataclass
class MetricRecord:
    method: str
    seed: int
    env_step: int
    return_: float = nan
    train_td: float = nan
    valid_td: float = nan
    q_gap: float = nan
    mc_bias: float = nan

    def get(self, metric: str) -> float:
        return self.return_ if metric == "return" else getattr(self, metric)


class MetricLog:
    """Per-(method, seed, step) diagnostic records with the CSV schema above."""

    def __init__(self, records: Iterable[MetricRecord] = ()):
        self.records: list[MetricRecord] = []
        self._last: dict[tuple[str, int], int] = {}
        for r in records:
            self.append(r)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, rec: MetricRecord):
        key = (rec.method, rec.seed)
        if key in self._last and rec.env_step <= self._last[key]:
            raise ValueError(f"env_step must increase for {key}: {rec.env_step} after {self._last[key]}")
        self._last[key] = rec.env_step
        self.records.append(rec)

    def add(self, method: str, seed: int, env_step: int, **values) -> MetricRecord:
        if "return" in values:
            values["return_"] = values.pop("return")
        rec = MetricRecord(method, seed, env_step, **values)
        self.append(rec)
        return rec

    def extend(self, other: Iterable[MetricRecord]):
        for r in other:
            self.append(r)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.records))

    @property
    def seeds(self) -> list[int]:
        return list(dict.fromkeys(r.seed for r in self.records))

    def select(self, method: str | None = None, seed: int | None = None) -> MetricLog:
        return MetricLog(r for r in self.records
                         if (method is None or r.method == method) and (seed is None or r.seed == seed))

    def series(self, method: str, seed: int, metric: str):
        recs = [r for r in self.records if r.method == method and r.seed == seed]
        return np.array([r.env_step for r in recs]), np.array([r.get(metric) for r in recs])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                row = [r.method, r.seed, r.env_step]
                row += ["" if math.isnan(r.get(m)) else repr(float(r.get(m))) for m in METRICS]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path) -> MetricLog:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {rows[0] if rows else None}")
        log = cls()
        for row in rows[1:]:
            vals = [nan if v == "" else float(v) for v in row[3:]]
            log.append(MetricRecord(row[0], int(row[1]), int(row[2]), *vals))
        return log


# ---------------------------------------------------------------------- aggregation

@dataclass
class RankSummary:
    mean: float
    stderr: float
    values: list[float]


def _stderr(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0


def _as_tasks(logs) -> dict[str, MetricLog]:
    if isinstance(logs, Mapping):
        return {k: v if isinstance(v, MetricLog) else MetricLog(v) for k, v in logs.items()}
    return {"": logs if isinstance(logs, MetricLog) else MetricLog(logs)}


def _aligned(log: MetricLog, seed: int, methods: list[str], metrics: tuple[str, ...], steps_filter):
    """``{step: {method: {metric: value}}}`` over steps shared by every method."""
    table: dict[int, dict[str, MetricRecord]] = defaultdict(dict)
    for r in log.records:
        if r.seed == seed and steps_filter(r.env_step):
            table[r.env_step][r.method] = r
    steps = sorted(table)
    for s in steps:
        missing = [m for m in methods if m not in table[s]]
        if missing:
            raise ValueError(f"misaligned logs: seed {seed} step {s} lacks methods {missing}")
    return steps, table


def return_ranks(returns) -> np.ndarray:
    """Rank 1 = highest return; ties share the mean of their ranks."""
    return rankdata(-np.asarray(returns, dtype=float), method="average")


def rank_by_metric(logs, metric: str, interval: int = LOG_INTERVAL) -> RankSummary:
    """Average return-rank of the candidate a metric would select.

    At every logged step on the ``interval`` grid the candidate with the
    smallest metric (smallest ``|bias|`` for ``mc_bias``) is selected and the
    rank of its return among all candidates recorded.  Ranks are averaged over
    steps per (task, seed) and summarized by mean and standard error across
    those units.
    """
    units = []
    for task, log in _as_tasks(logs).items():
        methods = log.methods
        for seed in log.seeds:
            steps, table = _aligned(log, seed, methods, (metric, "return"), lambda s: s % interval == 0)
            if not steps:
                continue
            ranks = []
            for s in steps:
                vals = np.array([table[s][m].get(metric) for m in methods])
                if metric == "mc_bias":
                    vals = np.abs(vals)
                pick = int(np.argmin(vals))
                ranks.append(return_ranks([table[s][m].return_ for m in methods])[pick])
            units.append(float(np.mean(ranks)))
    if not units:
        raise ValueError("no aligned steps to rank")
    return RankSummary(float(np.mean(units)), _stderr(units), units)


def step_ranks(log: MetricLog, seed: int, window: int | None = None):
    """Per-step return ranks: ``(steps, methods, ranks[step, method])``."""
    methods = log.methods
    steps, table = _aligned(log, seed, methods, ("return",),
                            lambda s: window is None or s <= window)
    ranks = np.array([return_ranks([table[s][m].return_ for m in methods]) for s in steps])
    return steps, methods, ranks.reshape(len(steps), len(methods))


def average_rank(return_logs, window: int | None = None) -> dict[str, tuple[float, float]]:
    """Mean return rank per method over steps ``<= window`` and tasks.

    Returns ``{method: (mean, stderr)}`` with the standard error taken across
    seeds (each seed's value is its average over tasks and steps).
    """
    per_seed: dict[int, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    methods: list[str] | None = None
    for task, log in _as_tasks(return_logs).items():
        if methods is None:
            methods = log.methods
        elif set(log.methods) != set(methods):
            raise ValueError(f"task {task!r} has methods {log.methods}, expected {methods}")
        for seed in log.seeds:
            _, ms, ranks = step_ranks(log, seed, window)
            for j, m in enumerate(ms):
                per_seed[seed][m].extend(ranks[:, j])
    out = {}
    for m in methods or []:
        vals = [float(np.mean(per_seed[s][m])) for s in per_seed]
        out[m] = (float(np.mean(vals)), _stderr(vals))
    return out


def normalized_score(return_logs, task_min: Mapping[str, float] | None = None, window: int | None = None):
    """Aggregate normalized-return curve per method.

    Each task's returns are shifted by ``task_min[task]`` (0 if absent) and
    divided by the shifted best seed-averaged return over all methods and steps.
    The curves are then averaged over tasks and seeds at every step.
    Returns ``{method: (steps, curve)}``.
    """
    task_min = task_min or {}
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for task, log in _as_tasks(return_logs).items():
        lo = float(task_min.get(task, 0.0))
        recs = [r for r in log.records if not math.isnan(r.return_) and (window is None or r.env_step <= window)]
        by_ms: dict[tuple[str, int], list[float]] = defaultdict(list)
        for r in recs:
            by_ms[(r.method, r.env_step)].append(r.return_)
        best = max(np.mean(v) for v in by_ms.values())
        span = best - lo
        if not span > 0:
            raise ValueError(f"task {task!r}: best average return {best} does not exceed the minimum {lo}")
        for r in recs:
            acc[r.method][r.env_step].append((r.return_ - lo) / span)
    return {m: (np.array(sorted(d)), np.array([np.mean(d[s]) for s in sorted(d)])) for m, d in acc.items()}


def oracle_curve(return_logs, window: int | None = None, step_scale: float = 1.1):
    """Best-in-hindsight method per task with its step axis stretched by ``step_scale``.

    Returns ``{task: (method, steps * step_scale, seed-mean returns)}``.
    """
    out = {}
    for task, log in _as_tasks(return_logs).items():
        best, best_val = None, -math.inf
        for m in log.methods:
            vals = [r.return_ for r in log.records
                    if r.method == m and (window is None or r.env_step <= window) and not math.isnan(r.return_)]
            if vals and np.mean(vals) > best_val:
                best, best_val = m, float(np.mean(vals))
        steps = sorted({r.env_step for r in log.records if r.method == best})
        curve = [np.mean([r.return_ for r in log.records if r.method == best and r.env_step == s]) for s in steps]
        out[task] = (best, np.array(steps) * step_scale, np.array(curve))
    return out


def record_dict(rec: MetricRecord) -> dict:
    d = asdict(rec)
    d["return"] = d.pop("return_")
    return d

