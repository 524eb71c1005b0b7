"""Experiment runners behind the CLI.

Each runner takes a resolved ``RunConfig``, writes its outputs under
``config.out`` and returns the in-memory logs:

* ``metrics_seed{s}.csv``   metric log (schema of ``metrics.CSV_COLUMNS``)
* ``events_seed{s}.jsonl``  resets, selections, held-out collections, evaluations
* ``manifest.ini``          the full resolved config
* ``summary.json``          rank and score tables where applicable
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import RunConfig, write_manifest
from .envs import Env, make_spec
from .pool import AvtdRunner, LoopConfig, Streams, make_pool
from .regularizers import parse_preset, preset_name
from .replay import HeldoutBuffer, ReplayBuffer, StreamSchedule, dataset_load, dataset_save
from .sac import SacAgent


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_events(events, path):
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_events(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _map_seeds(fn, cfg: RunConfig):
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(min(cfg.jobs, len(cfg.seeds))) as ex:
            return list(ex.map(fn, [cfg] * len(cfg.seeds), cfg.seeds))
    return [fn(cfg, s) for s in cfg.seeds]


def _save_seed(cfg: RunConfig, seed: int, log: M.MetricLog, events: list[dict]):
    out = _out_dir(cfg)
    log.to_csv(out / f"metrics_seed{seed}.csv")
    write_events(events, out / f"events_seed{seed}.jsonl")


def _merge(logs) -> M.MetricLog:
    merged = M.MetricLog()
    for log in logs:
        merged.extend(log)
    return merged


# ---------------------------------------------------------------------- online

def single_agent_runner(cfg: RunConfig, seed: int, reg: str, method: str,
                        loop: LoopConfig | None = None) -> AvtdRunner:
    """A one-member pool: plain single-agent training through the pool loop."""
    spec = make_spec(cfg.env)
    streams = Streams(seed)
    pool = make_pool(spec.observation_dim, spec.action_dim, cfg.sac_config(reg), [parse_preset(reg)],
                     streams, selection="uniform", names=[reg])
    return AvtdRunner(pool, Env(spec), streams, loop or cfg.loop_config(), method=method, seed=seed)


def _online_seed(cfg: RunConfig, seed: int):
    t0 = time.perf_counter()
    runner = single_agent_runner(cfg, seed, cfg.reg, preset_name(parse_preset(cfg.reg)))
    runner.run(cfg.steps)
    runner.events.append({"event": "done", "seconds": time.perf_counter() - t0, "step": runner.step})
    _save_seed(cfg, seed, runner.log, runner.events)
    return runner.log


def run_online(cfg: RunConfig) -> M.MetricLog:
    """Single-agent SAC with the configured regularizer and UTD."""
    out = _out_dir(cfg)
    write_manifest(cfg, out / "manifest.ini")
    return _merge(_map_seeds(_online_seed, cfg))


# ---------------------------------------------------------------------- dataset logging

def heldout_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".heldout" + p.suffix)


def events_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".events.jsonl")


def run_log_dataset(cfg: RunConfig, path) -> tuple[Path, Path]:
    """Train one agent (typically resetting, high UTD) and log its data.

    Every training transition after warm-up goes to ``path`` in collection
    order.  Held-out episodes are collected every ``heldout_every`` training
    episodes by the same agent and written to a separate file; they do not
    count toward ``steps``.  Resets and evaluations go to a sidecar JSONL file.
    """
    if len(cfg.seeds) != 1:
        raise ValueError("log_dataset takes exactly one seed")
    seed = cfg.seeds[0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    loop = cfg.loop_config(count_heldout_steps=False)
    runner = single_agent_runner(cfg, seed, cfg.reg, "logger", loop)
    runner.run(cfg.steps)
    data = runner.pool.buffer.contents()
    if len(data) != cfg.steps:
        raise RuntimeError(f"replay buffer holds {len(data)} transitions, expected {cfg.steps};"
                           " raise the buffer capacity")
    dataset_save(data[cfg.warmup_steps:], path)
    hp = heldout_path(path)
    dataset_save(runner.pool.heldout.contents(), hp)
    write_events(runner.events, events_path(path))
    write_manifest(cfg, path.with_name(path.stem + ".manifest.ini"),
                   {"dataset": {"path": path.name, "heldout": hp.name,
                                "count": cfg.steps - cfg.warmup_steps,
                                "heldout_count": len(runner.pool.heldout)}})
    return path, hp


# ---------------------------------------------------------------------- offline analysis

def offline_reg(preset: str):
    """Offline analyses add FN to every critic that has no LN."""
    reg = parse_preset(preset)
    return reg if reg.layer_norm else replace(reg, feature_norm=True)


def offline_candidates(cfg: RunConfig) -> list[tuple[str, object, int]]:
    regs = cfg.regs or (cfg.reg,)
    out = []
    for r in regs:
        for u in cfg.utds:
            label = f"utd{u}" if len(regs) == 1 else (f"{r}" if len(cfg.utds) == 1 else f"{r}:utd{u}")
            out.append((label, offline_reg(r), u))
    return out


def _offline_paths(cfg: RunConfig):
    if not cfg.dataset:
        raise ValueError("offline.dataset is required for offline analysis")
    hp = Path(cfg.heldout) if cfg.heldout else heldout_path(cfg.dataset)
    for p in (Path(cfg.dataset), hp):
        if not p.exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
    return Path(cfg.dataset), hp


def _offline_seed(cfg: RunConfig, seed: int):
    spec = make_spec(cfg.env)
    dpath, hpath = _offline_paths(cfg)
    data = dataset_load(dpath, spec.observation_dim, spec.action_dim)
    held = dataset_load(hpath, spec.observation_dim, spec.action_dim)
    if len(data) < cfg.steps:
        raise ValueError(f"dataset has {len(data)} transitions, fewer than the {cfg.steps} requested steps")
    mode = "shuffled" if cfg.kind == "offline_shuffled" else "in_order"
    eval_env = Env(spec)
    log = M.MetricLog()
    events = []
    for label, reg, utd in offline_candidates(cfg):
        t0 = time.perf_counter()
        sac = cfg.sac_config(reg, utd=utd, backup="deterministic")
        agent = SacAgent(spec.observation_dim, spec.action_dim, sac, np.random.default_rng([seed, 100]))
        buf = ReplayBuffer(spec.observation_dim, spec.action_dim)
        hbuf = HeldoutBuffer(spec.observation_dim, spec.action_dim)
        stream = StreamSchedule(data, mode, seed)
        hstream = StreamSchedule(held, mode, seed)
        for step in range(1, cfg.steps + 1):
            stream.reveal(buf, 1)
            # held-out data becomes visible in proportion to the training stream
            want = (len(held) * stream.cursor) // len(data)
            if want > hstream.cursor:
                hstream.reveal(hbuf, want - hstream.cursor)
            if step > sac.warmup_steps:
                agent.train_step(buf)
            if step % cfg.eval_interval == 0:
                key = [seed, step]
                rec = {"return": M.evaluate_return(agent, eval_env, cfg.eval_trials, np.random.default_rng(key + [0])),
                       "train_td": M.train_td(agent, buf, np.random.default_rng(key + [1]), 10_000),
                       "q_gap": M.q_gap(agent, buf, 1000, np.random.default_rng(key + [2]))}
                if len(hbuf):
                    rec["valid_td"] = M.validation_td(agent, hbuf, np.random.default_rng(key + [3]))
                if cfg.mc_traj:
                    rec["mc_bias"] = M.mc_bias(agent, eval_env, sac, cfg.mc_traj, np.random.default_rng(key + [4]))
                log.add(label, seed, step, **rec)
                events.append({"event": "evaluation", "method": label, "step": step, **rec})
        events.append({"event": "done", "method": label, "seconds": time.perf_counter() - t0})
    _save_seed(cfg, seed, log, events)
    return log


def offline_summary(log: M.MetricLog, interval: int) -> dict:
    """Average return rank of the candidate each metric would pick."""
    out = {}
    if len(log.methods) < 2:
        return out
    for metric in ("train_td", "valid_td", "q_gap", "mc_bias"):
        vals = [r.get(metric) for r in log.records]
        if not vals or any(math.isnan(v) for v in vals):
            continue
        s = M.rank_by_metric(log, metric, interval)
        out[metric] = {"mean": s.mean, "stderr": s.stderr}
    return out


def run_offline_analysis(cfg: RunConfig, dataset=None) -> M.MetricLog:
    """Passive agents trained on a logged stream, one per UTD / regularizer."""
    if dataset is not None:
        cfg = cfg.with_(dataset=str(dataset))
    _offline_paths(cfg)
    out = _out_dir(cfg)
    write_manifest(cfg, out / "manifest.ini")
    log = _merge(_map_seeds(_offline_seed, cfg))
    summary = {"kind": cfg.kind, "rank_by_metric": offline_summary(log, cfg.eval_interval)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return log


# ---------------------------------------------------------------------- AVTD

def top_level(log: M.MetricLog) -> M.MetricLog:
    """Drop per-member rows (``method/i:name``)."""
    return M.MetricLog(r for r in log.records if "/" not in r.method)


def _avtd_seed(cfg: RunConfig, seed: int):
    spec = make_spec(cfg.env)
    streams = Streams(seed)
    pool = make_pool(spec.observation_dim, spec.action_dim, cfg.sac_config(), [parse_preset(p) for p in cfg.pool],
                     streams, cfg.selection, cfg.epsilon, list(cfg.pool), cfg.metric_interval)
    runner = AvtdRunner(pool, Env(spec), streams, cfg.loop_config(), method="avtd", seed=seed)
    runner.run(cfg.steps)
    log = runner.log
    events = runner.events
    events.append({"event": "selection_totals", "step": runner.step, "names": pool.names,
                   "counts": pool.selection_counts.tolist(), "greedy": pool.greedy_counts.tolist()})
    if cfg.uniform_baseline and len(pool) > 1:
        ustreams = Streams(seed)
        upool = make_pool(spec.observation_dim, spec.action_dim, cfg.sac_config(),
                          [parse_preset(p) for p in cfg.pool], ustreams, "uniform", names=list(cfg.pool))
        ur = AvtdRunner(upool, Env(spec), ustreams, cfg.loop_config(log_members=False), method="uniform", seed=seed)
        ur.run(cfg.steps)
        log.extend(ur.log)
    if cfg.baselines:
        for p in dict.fromkeys(cfg.pool):
            r = single_agent_runner(cfg, seed, p, p)
            r.run(cfg.steps)
            log.extend(r.log)
    _save_seed(cfg, seed, log, events)
    return log


def avtd_summary(log: M.MetricLog, env: str, window: int | None = None) -> dict:
    top = top_level(log)
    summary: dict = {"methods": top.methods}
    if len(top.methods) > 1:
        summary["average_rank"] = {m: {"mean": v[0], "stderr": v[1]}
                                   for m, v in M.average_rank({env: top}, window).items()}
    lo = make_spec(env).return_bounds[0]
    ns = M.normalized_score({env: top}, {env: lo}, window)
    summary["normalized_score"] = {m: {"steps": s.tolist(), "score": c.tolist()} for m, (s, c) in ns.items()}
    return summary


def run_avtd_cli(cfg: RunConfig) -> M.MetricLog:
    out = _out_dir(cfg)
    write_manifest(cfg, out / "manifest.ini")
    log = _merge(_map_seeds(_avtd_seed, cfg))
    (out / "summary.json").write_text(json.dumps(avtd_summary(log, cfg.env, cfg.steps), indent=2))
    return log


# ---------------------------------------------------------------------- report

def load_run(run_dir) -> tuple[RunConfig, M.MetricLog]:
    from .config import read_manifest
    d = Path(run_dir)
    cfg = read_manifest(d / "manifest.ini")
    logs = [M.MetricLog.from_csv(p) for p in sorted(d.glob("metrics_seed*.csv"))]
    if not logs:
        raise FileNotFoundError(f"{d}: no metrics_seed*.csv files")
    return cfg, _merge(logs)


def report(run_dirs, window: int | None = None, step_scale: float = 1.1) -> dict:
    """Aggregate logged runs.  Runs on the same environment are one task."""
    tasks: dict[str, M.MetricLog] = {}
    kinds = set()
    seen: dict[tuple, str] = {}
    interval: dict[str, int] = {}
    for d in run_dirs:
        cfg, log = load_run(d)
        kinds.add(cfg.kind)
        interval[cfg.env] = max(interval.get(cfg.env, 1), cfg.eval_interval)
        log = top_level(log)
        for r in log.records:
            key = (cfg.env, r.method, r.seed)
            if seen.setdefault(key, str(d)) != str(d):
                raise ValueError(f"method {r.method!r} seed {r.seed} on {cfg.env} appears in both"
                                 f" {seen[key]} and {d}")
        tasks.setdefault(cfg.env, M.MetricLog()).extend(log)
    rep: dict = {"tasks": sorted(tasks)}
    if all(len(t.methods) > 1 for t in tasks.values()):
        rep["average_rank"] = {m: list(v) for m, v in M.average_rank(tasks, window).items()}
    ns = M.normalized_score(tasks, {t: make_spec(t).return_bounds[0] for t in tasks}, window)
    rep["final_normalized_score"] = {m: float(c[-1]) for m, (s, c) in ns.items()}
    rep["oracle"] = {t: {"method": m, "steps": s.tolist(), "return": c.tolist()}
                     for t, (m, s, c) in M.oracle_curve(tasks, window, step_scale).items()}
    if kinds & {"offline_stream", "offline_shuffled"}:
        rep["rank_by_metric"] = {t: offline_summary(log, interval[t]) for t, log in tasks.items()}
    return rep


def format_report(rep: dict) -> str:
    lines = [f"tasks: {', '.join(rep['tasks'])}"]
    if "average_rank" in rep:
        lines.append("average rank (lower is better):")
        for m, (mean, se) in sorted(rep["average_rank"].items(), key=lambda kv: kv[1][0]):
            lines.append(f"  {m:<24s} {mean:6.3f} +- {se:.3f}")
    lines.append("final normalized score:")
    for m, v in sorted(rep["final_normalized_score"].items(), key=lambda kv: -kv[1]):
        lines.append(f"  {m:<24s} {v:6.3f}")
    for t, o in rep["oracle"].items():
        lines.append(f"oracle ({t}): {o['method']}, steps scaled to {o['steps'][-1]:.0f}")
    for t, table in rep.get("rank_by_metric", {}).items():
        lines.append(f"rank of the metric-selected candidate ({t}):")
        for metric, s in table.items():
            lines.append(f"  {metric:<10s} {s['mean']:6.3f} +- {s['stderr']:.3f}")
    return "\n".join(lines)
