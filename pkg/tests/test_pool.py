import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binomtest, chisquare

from avtd.envs import Env, make_spec
from avtd.pool import (AgentPool, AvtdRunner, LoopConfig, Streams, epsilon_greedy, make_pool, run_avtd,
                       select_agent)
from avtd.regularizers import parse_preset
from avtd.replay import HeldoutBuffer, ReplayBuffer
from avtd.sac import SacAgent, SacConfig

CFG = SacConfig(hidden=(8, 8), batch_size=8, warmup_steps=50)
QUIET = LoopConfig(eval_interval=10**9, heldout_every=0)


def pool_of(regs, seed=0, selection="valid_td", epsilon=0.1, config=CFG):
    return make_pool(3, 1, config, [parse_preset(r) for r in regs], Streams(seed), selection, epsilon)


def flat(agent):
    nets = agent.critics + agent.targets + [agent.actor]
    return np.concatenate([v.ravel() for n in nets for v in n.params.values()] + [[agent.log_alpha]])


# ---------------------------------------------------------------- selection rule

def test_argmin_at_zero_epsilon():
    pool = pool_of(["plain"] * 3, epsilon=0.0)
    assert select_agent(pool, np.random.default_rng(0), values=np.array([0.5, 0.2, 0.9])) == 1


def test_uniform_at_full_epsilon():
    pool = pool_of(["plain"] * 5, epsilon=1.0)
    rng = np.random.default_rng(0)
    picks = np.array([select_agent(pool, rng, values=np.arange(5.0)) for _ in range(100_000)])
    freq = np.bincount(picks, minlength=5)
    assert np.all(np.abs(freq / 1e5 - 0.2) < 0.01)
    assert chisquare(freq).pvalue > 0.01


def test_single_agent_always_zero():
    pool = pool_of(["plain"], epsilon=1.0)
    rng = np.random.default_rng(0)
    assert all(select_agent(pool, rng, values=np.array([3.0])) == 0 for _ in range(100))


def test_ties_go_to_lowest_index():
    idx, greedy = epsilon_greedy(np.array([1.0, 0.5, 0.5, 0.5]), 0.0, np.random.default_rng(0))
    assert (idx, greedy) == (1, True)


def test_identical_agents_select_index_zero():
    agents = [SacAgent(3, 1, CFG, np.random.default_rng(7)) for _ in range(3)]
    pool = AgentPool(agents, ReplayBuffer(3, 1), HeldoutBuffer(3, 1), epsilon=0.0)
    runner = AvtdRunner(pool, Env("pendulum"), Streams(0), LoopConfig(eval_interval=10**9, heldout_every=1))
    runner.run(600)
    vals = pool.compute_metrics(np.random.default_rng(0))
    assert vals[0] == vals[1] == vals[2]
    assert select_agent(pool, np.random.default_rng(0), vals) == 0


def test_greedy_frequency_binomial():
    k, eps, n = 5, 0.1, 10_000
    pool = pool_of(["plain"] * k, epsilon=eps)
    values = np.array([3.0, 2.0, 0.1, 4.0, 2.5])   # agent 2 is best by construction
    rng = np.random.default_rng(0)
    hits = sum(select_agent(pool, rng, values) == 2 for _ in range(n))
    expected = 1 - eps * (k - 1) / k
    ci = binomtest(hits, n).proportion_ci(0.95)
    assert ci.low <= expected <= ci.high
    assert abs(hits / n - expected) < 0.02


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-200, 200), min_size=1, max_size=8, unique=True),
       st.sampled_from([np.exp, np.arctan, lambda x: x**3, lambda x: 2 * x + 5]))
def test_selection_invariant_to_monotone_transform(values, f):
    # grid spacing keeps transformed values distinct in float64
    v = np.array(values) / 20.0
    a, _ = epsilon_greedy(v, 0.0, np.random.default_rng(0))
    b, _ = epsilon_greedy(f(v), 0.0, np.random.default_rng(0))
    assert a == b


def test_metric_fallback_before_heldout():
    pool = pool_of(["plain"] * 4, epsilon=0.0)
    assert pool.compute_metrics(np.random.default_rng(0)) is None
    rng = np.random.default_rng(0)
    picks = {select_agent(pool, rng) for _ in range(200)}
    assert picks == {0, 1, 2, 3}
    assert pool.greedy_counts.sum() == 0


def test_pool_configs_must_match():
    a = SacAgent(3, 1, CFG, np.random.default_rng(0))
    b = SacAgent(3, 1, CFG.with_(utd=2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        AgentPool([a, b], ReplayBuffer(3, 1), HeldoutBuffer(3, 1))
    with pytest.raises(ValueError):
        pool_of(["plain"], selection="return")


# ---------------------------------------------------------------- loop accounting

def test_k_times_utd_updates_per_step():
    pool = pool_of(["plain", "ln", "wd0.01"], config=CFG.with_(utd=9, warmup_steps=10))
    runner = AvtdRunner(pool, Env("pendulum"), Streams(0), QUIET)
    runner.run(10)
    before = sum(a.critic_update_count for a in pool.agents)
    n = len(pool.buffer)
    runner.env_step(11)
    assert sum(a.critic_update_count for a in pool.agents) - before == 27
    assert len(pool.buffer) == n + 1


def test_shared_buffer_identity():
    pool = pool_of(["plain", "ln"])
    runner = AvtdRunner(pool, Env("pendulum"), Streams(0), QUIET)
    runner.run(120)
    assert pool.buffer.sample_calls == 2 * (120 - CFG.warmup_steps)


def test_heldout_episode_accounting():
    pool = pool_of(["plain", "ln"])
    runner = AvtdRunner(pool, Env("pendulum"), Streams(0), LoopConfig(eval_interval=10**9, heldout_every=10))
    runner.run(11 * 200)
    assert runner.train_episodes == 10
    assert len(pool.heldout) == 200 and len(pool.buffer) == 10 * 200
    assert runner.step == 11 * 200 == runner.train_steps + runner.heldout_steps


def test_heldout_collect_adds_only_heldout():
    pool = pool_of(["plain"])
    runner = AvtdRunner(pool, Env("pendulum"), Streams(0), QUIET)
    runner.heldout_collect()
    assert len(pool.heldout) == 200 and len(pool.buffer) == 0


def test_no_updates_during_heldout():
    pool = pool_of(["plain"], config=CFG.with_(warmup_steps=0))
    runner = AvtdRunner(pool, Env("pendulum"), Streams(0), QUIET)
    runner.run(8)   # some data in the buffer
    n = pool.agents[0].critic_update_count
    runner.heldout_collect()
    assert pool.agents[0].critic_update_count == n
    runner2 = AvtdRunner(pool, Env("pendulum"), Streams(0),
                         LoopConfig(eval_interval=10**9, heldout_every=0, update_during_heldout=True))
    runner2.heldout_collect()
    assert pool.agents[0].critic_update_count == n + 200


def test_heldout_never_read_by_training():
    pool = pool_of(["plain", "ln"], selection="uniform")
    runner = AvtdRunner(pool, Env("pendulum"), Streams(0), LoopConfig(eval_interval=10**9, heldout_every=1))
    runner.run(800)
    assert len(pool.heldout) > 0 and pool.heldout.reads == 0


def test_zero_steps_empty_log():
    pool = pool_of(["plain", "ln"])
    runner = run_avtd(pool, Env("pendulum"), 0, Streams(0))
    assert len(runner.log) == 0 and all(a.critic_update_count == 0 for a in pool.agents)


def test_uniform_mode_reselects_per_episode():
    pool = pool_of(["plain", "ln", "sn"], selection="uniform")
    runner = AvtdRunner(pool, Env("pendulum"), Streams(0), QUIET)
    runner.run(2000)
    sel = [e for e in runner.events if e["event"] == "selection"]
    for e in sel:
        if sum(e["counts"]):
            assert sorted(e["counts"])[:-1] == [0, 0]
    assert len({int(np.argmax(e["counts"])) for e in sel if sum(e["counts"])}) > 1


def test_reset_events():
    pool = pool_of(["reset300", "plain"])
    runner = AvtdRunner(pool, Env("pendulum"), Streams(0), QUIET)
    runner.run(700)
    resets = [e for e in runner.events if e["event"] == "reset"]
    assert [(e["step"], e["agent"]) for e in resets] == [(300, 0), (600, 0)]
    assert pool.agents[0].n_resets == 2 and pool.agents[1].n_resets == 0


# ---------------------------------------------------------------- reproducibility

def plain_loop(seed, steps, config):
    """Standalone single-agent SAC loop, written without the pool machinery."""
    env = Env(make_spec("pendulum"))
    env_rng, explore, act = (np.random.default_rng([seed, i]) for i in range(3))
    agent = SacAgent(3, 1, config, np.random.default_rng([seed, 100]))
    buf = ReplayBuffer(3, 1)
    from avtd.replay import Transition
    obs = None
    for t in range(steps):
        if obs is None:
            obs = env.reset(env_rng)
        a = explore.uniform(-1, 1, 1) if t < config.warmup_steps else agent.act(obs, act)
        nxt, r, term, trunc = env.step(a)
        buf.append(Transition(obs, a, r, nxt, term, trunc))
        obs = None if (term or trunc) else nxt
        if t >= config.warmup_steps:
            agent.train_step(buf)
    return agent, buf


def test_single_member_uniform_pool_matches_plain_loop():
    agent, buf = plain_loop(3, 500, CFG)
    pool = make_pool(3, 1, CFG, [parse_preset("plain")], Streams(3), "uniform")
    AvtdRunner(pool, Env("pendulum"), Streams(3), QUIET).run(500)
    assert np.array_equal(flat(agent), flat(pool.agents[0]))
    assert np.array_equal(buf.contents().obs, pool.buffer.contents().obs)


def run_small(seed, workers):
    pool = pool_of(["plain", "ln", "do0.1"], seed=seed)
    loop = LoopConfig(eval_interval=300, eval_trials=1, heldout_every=1, mc_traj=1, workers=workers)
    runner = AvtdRunner(pool, Env("pendulum"), Streams(seed), loop)
    runner.run(900)
    return runner


def test_reproducible_and_thread_equivalent():
    a, b, c = run_small(5, 1), run_small(5, 1), run_small(5, 3)
    for other in (b, c):
        assert [tuple(map(str, vars(r).values())) for r in a.log] == [tuple(map(str, vars(r).values())) for r in other.log]
        for x, y in zip(a.pool.agents, other.pool.agents):
            assert np.array_equal(flat(x), flat(y))
        assert a.events == other.events


def test_evaluation_rows():
    r = run_small(1, 1)
    methods = r.log.methods
    assert methods[0] == "avtd" and "avtd/1:ln" in methods
    rec = r.log.records[0]
    assert rec.env_step == 300 and np.isfinite(rec.return_)
