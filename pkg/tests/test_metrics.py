import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avtd import metrics as M
from avtd.nn import MlpSpec, ParamSet
from avtd.regularizers import parse_preset
from avtd.replay import Batch, HeldoutBuffer, ReplayBuffer
from avtd.sac import SacAgent, SacConfig
import oracles


def random_agent(seed=0, obs_dim=3, act_dim=2, **kw):
    cfg = SacConfig(hidden=(8, 8), **kw)
    agent = SacAgent(obs_dim, act_dim, cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for net in agent.critics + agent.targets + [agent.actor]:
        for v in net.params.values():
            v += 0.3 * rng.standard_normal(v.shape)
        net.touch()
    agent.log_alpha = math.log(0.3)
    return agent


def random_batch(n=20, obs_dim=3, act_dim=2, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.standard_normal((n, obs_dim)), rng.uniform(-1, 1, (n, act_dim)), rng.standard_normal(n),
                 rng.standard_normal((n, obs_dim)), rng.random(n) < 0.2, np.zeros(n, bool))


def heldout_of(batch):
    h = HeldoutBuffer(batch.obs_dim, batch.act_dim)
    h.extend(batch)
    return h


def clone(rng):
    c = np.random.default_rng(0)
    c.bit_generator.state = rng.bit_generator.state
    return c


# ---------------------------------------------------------------- validation TD

def test_validation_td_zero_critic():
    agent = SacAgent(2, 1, SacConfig(hidden=(4, 4), backup="deterministic"), np.random.default_rng(0))
    for net in agent.critics + agent.targets:
        last = net.spec.n_dense - 1
        net.params[f"dense{last}.weight"][:] = 0
        net.params[f"dense{last}.bias"][:] = 0
    b = Batch(np.zeros((5, 2)), np.zeros((5, 1)), np.ones(5), np.zeros((5, 2)), np.zeros(5, bool), np.zeros(5, bool))
    assert M.validation_td(agent, heldout_of(b)) == 1.0


@pytest.mark.parametrize("backup", ["entropy", "deterministic"])
@pytest.mark.parametrize("preset", ["plain", "ln", "fn"])
def test_validation_td_matches_brute_force(backup, preset):
    agent = random_agent(3, backup=backup, reg=parse_preset(preset))
    b = random_batch(25)
    rng = np.random.default_rng(7)
    probe = clone(rng)
    value = M.validation_td(agent, heldout_of(b), rng)
    if backup == "entropy":
        a2, logp2 = oracles.policy_rows(agent, b.next_obs, probe.standard_normal((len(b), 2)))
    else:
        a2 = np.array([np.tanh(oracles.mlp_row(agent.actor_spec, agent.actor.params, o)[:2]) for o in b.next_obs])
        logp2 = np.zeros(len(b))
    oracle = float(np.mean(oracles.td_errors(agent, b, a2, logp2)))
    assert abs(value - oracle) <= 1e-10 * max(1.0, abs(oracle))


def test_validation_td_duplicate_invariant():
    agent = random_agent(backup="deterministic")
    b = random_batch(10)
    one = M.validation_td(agent, heldout_of(b))
    two = M.validation_td(agent, heldout_of(Batch.concat([b, b])))
    assert abs(one - two) < 1e-12


def test_validation_td_empty_raises():
    with pytest.raises(ValueError):
        M.validation_td(random_agent(), HeldoutBuffer(3, 2))


def test_train_td_full_and_sampled():
    agent = random_agent(backup="deterministic")
    buf = ReplayBuffer(3, 2)
    b = random_batch(30)
    buf.extend(b)
    full = M.train_td(agent, buf, np.random.default_rng(0))
    assert abs(full - np.mean(M.td_errors(agent, b))) < 1e-12
    assert np.isfinite(M.train_td(agent, buf, np.random.default_rng(0), 10))


# ---------------------------------------------------------------- Q-gap

def test_q_gap_matches_brute_force():
    agent = random_agent(5)
    buf = ReplayBuffer(3, 2)
    buf.extend(random_batch(40))
    rng = np.random.default_rng(11)
    probe = clone(rng)
    value = M.q_gap(agent, buf, 15, rng)
    idx = probe.integers(0, 40, size=15)
    b = buf.contents()[idx]
    a_pi, _ = oracles.policy_rows(agent, b.obs, probe.standard_normal((15, 2)))
    q_pi = np.mean([oracles.q_row(agent, o, a) for o, a in zip(b.obs, a_pi)])
    q_d = np.mean([oracles.q_row(agent, o, a) for o, a in zip(b.obs, b.action)])
    assert abs(value - (q_pi - q_d)) <= 1e-10


def test_q_gap_replayed_actions_zero():
    agent = random_agent()
    b = random_batch()
    assert M.q_gap_on(agent, b.obs, b.action, b.action) == 0.0


def test_q_gap_constant_critic_zero():
    agent = random_agent()
    for net in agent.critics:
        net.params["dense2.weight"][:] = 0
    assert M.q_gap(agent, random_batch(), 10, np.random.default_rng(0)) == 0.0


def test_q_gap_state_baseline_cancels():
    agent = random_agent()
    b = random_batch()
    a_pi = np.random.default_rng(1).uniform(-1, 1, b.action.shape)
    base = M.q_gap_on(agent, b.obs, b.action, a_pi)
    q = agent.q_value
    agent.q_value = lambda obs, a, which=0, **kw: q(obs, a, which, **kw) + np.sin(obs).sum(axis=1) * 7
    assert abs(M.q_gap_on(agent, b.obs, b.action, a_pi) - base) < 1e-12


def test_q_gap_linear_closed_form():
    """Q(s, a) = a with a near-deterministic policy at tanh(0.5)."""
    agent = SacAgent(2, 1, SacConfig(hidden=(8, 8)), np.random.default_rng(0))
    spec = MlpSpec((3, 2, 1))
    net = ParamSet.init(spec, np.random.default_rng(0))
    net.params["dense0.weight"][:] = [[0, 0], [0, 0], [1, -1]]
    net.params["dense1.weight"][:] = [[1], [-1]]
    agent.critic_spec, agent.critics = spec, [net, net.copy()]
    last = agent.actor_spec.n_dense - 1
    agent.actor.params[f"dense{last}.weight"][:] = 0
    agent.actor.params[f"dense{last}.bias"][:] = [0.5, -10]
    b = random_batch(50, 2, 1)
    gap = M.q_gap(agent, b, 2000, np.random.default_rng(0))
    # resampled with the same draws to get the dataset-action mean
    idx = np.random.default_rng(0).integers(0, 50, size=2000)
    assert gap == pytest.approx(math.tanh(0.5) - b.action[idx, 0].mean(), abs=1e-3)
    assert gap > 0


# ---------------------------------------------------------------- MC bias

def test_reward_to_go_example():
    assert np.allclose(M.discounted_reward_to_go([1, 1, 1], 0.5), [1.75, 1.5, 1.0])


def test_mc_bias_zero_everything():
    agent = SacAgent(2, 1, SacConfig(hidden=(4, 4)), np.random.default_rng(0))
    for net in agent.critics:
        net.params["dense2.weight"][:] = 0
    env = oracles.TwoStateMDP()
    env.rewards = (0.0, 0.0)
    assert M.mc_bias(agent, env, agent.config, 3) == 0.0


@pytest.mark.parametrize("discount", [0.5, 0.9, 0.99])
def test_mc_bias_matches_value_iteration(discount):
    cfg = SacConfig(hidden=(6, 6), discount=discount, backup="deterministic")
    agent = random_agent(2, obs_dim=2, act_dim=1, discount=discount, backup="deterministic")
    env = oracles.TwoStateMDP(horizon=12)
    q_pi = oracles.two_state_q(12, discount)
    bias = M.mc_bias(agent, env, agent.config, n_traj=3)
    states = np.arange(12) % 2
    q_theta = [oracles.q_row(agent, np.eye(2)[s], np.tanh(oracles.mlp_row(agent.actor_spec, agent.actor.params,
                                                                         np.eye(2)[s])[:1]))
               for s in states]
    oracle = float(np.mean(np.array(q_theta) - q_pi[np.arange(12), states]))
    assert abs(bias - oracle) < 1e-8
    assert cfg.backup == "deterministic"


def test_mc_bias_requires_trajectories():
    with pytest.raises(ValueError):
        M.mc_bias(random_agent(), oracles.TwoStateMDP(), SacConfig(), 0)


# ---------------------------------------------------------------- logs

def test_csv_round_trip(tmp_path):
    log = M.MetricLog()
    log.add("a", 0, 5000, **{"return": -1.5, "train_td": 0.25})
    log.add("a", 0, 10000, **{"return": 2.0, "valid_td": 1 / 3, "mc_bias": -0.1})
    log.add("b/0:ln", 1, 5000, q_gap=0.5)
    log.to_csv(tmp_path / "m.csv")
    back = M.MetricLog.from_csv(tmp_path / "m.csv")
    for r1, r2 in zip(log, back):
        d1, d2 = M.record_dict(r1), M.record_dict(r2)
        assert all((d1[k] == d2[k]) or (isinstance(d1[k], float) and math.isnan(d1[k]) and math.isnan(d2[k]))
                   for k in d1)
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == ",".join(M.CSV_COLUMNS)


def test_log_steps_must_increase():
    log = M.MetricLog()
    log.add("a", 0, 10)
    log.add("a", 1, 5)
    with pytest.raises(ValueError):
        log.add("a", 0, 10)


# ---------------------------------------------------------------- rank protocols

def mk(rows):
    """rows: (method, seed, step, return, metric dict)"""
    log = M.MetricLog()
    for m, s, t, ret, extra in rows:
        log.add(m, s, t, **{"return": ret}, **extra)
    return log


def test_rank_by_metric_hand_example():
    log = mk([("A", 0, 2500, 9, {"valid_td": 9}), ("B", 0, 2500, 0, {"valid_td": 0}),
              ("A", 0, 5000, 1, {"valid_td": 0.1}), ("B", 0, 5000, 2, {"valid_td": 0.2}),
              ("A", 0, 10000, 5, {"valid_td": 0.1}), ("B", 0, 10000, 2, {"valid_td": 0.2}),
              ("A", 1, 5000, 1, {"valid_td": 0.1}), ("B", 1, 5000, 1, {"valid_td": 0.2})])
    s = M.rank_by_metric(log, "valid_td", 5000)
    assert s.values == [1.5, 1.5] and s.mean == 1.5 and s.stderr == 0.0


def test_rank_by_metric_uses_abs_for_mc_bias():
    log = mk([("A", 0, 5000, 1, {"mc_bias": -5}), ("B", 0, 5000, 2, {"mc_bias": 1})])
    assert M.rank_by_metric(log, "mc_bias").mean == 1.0


def test_rank_by_metric_perfect_and_single():
    rng = np.random.default_rng(0)
    rows = []
    for seed in range(3):
        for step in range(5000, 50001, 5000):
            for m in "ABCD":
                r = float(rng.standard_normal())
                rows.append((m, seed, step, r, {"train_td": -r}))
    log = mk(rows)
    assert M.rank_by_metric(log, "train_td").mean == 1.0
    single = mk([r for r in rows if r[0] == "A"])
    assert M.rank_by_metric(single, "train_td").mean == 1.0


def test_rank_by_metric_random_selector():
    rng = np.random.default_rng(1)
    rows = []
    for step in range(1, 10_001):
        for m in "ABCD":
            rows.append((m, 0, step * 5000, float(rng.standard_normal()), {"q_gap": float(rng.standard_normal())}))
    s = M.rank_by_metric(mk(rows), "q_gap")
    assert abs(s.mean - 2.5) < 0.1


def test_rank_by_metric_misaligned_raises():
    log = mk([("A", 0, 5000, 1, {"valid_td": 1}), ("B", 0, 5000, 1, {"valid_td": 1}),
              ("A", 0, 10000, 1, {"valid_td": 1})])
    with pytest.raises(ValueError, match="misaligned"):
        M.rank_by_metric(log, "valid_td")


def test_rank_by_metric_over_tasks():
    t1 = mk([("A", 0, 5000, 1, {"valid_td": 0}), ("B", 0, 5000, 2, {"valid_td": 1})])
    t2 = mk([("A", 0, 5000, 3, {"valid_td": 0}), ("B", 0, 5000, 2, {"valid_td": 1})])
    s = M.rank_by_metric({"x": t1, "y": t2}, "valid_td")
    assert s.values == [2.0, 1.0] and s.mean == 1.5


def test_average_rank_hand_table():
    log = mk([("A", 0, 1, 3, {}), ("B", 0, 1, 1, {}), ("C", 0, 1, 2, {}),
              ("A", 0, 2, 1, {}), ("B", 0, 2, 1, {}), ("C", 0, 2, 5, {}),
              ("A", 1, 1, 0, {}), ("B", 1, 1, 1, {}), ("C", 1, 1, 2, {}),
              ("A", 1, 2, 0, {}), ("B", 1, 2, 1, {}), ("C", 1, 2, 2, {})])
    table = M.average_rank(log)
    assert table["A"] == pytest.approx((2.375, 0.625), abs=1e-12)
    assert table["B"] == pytest.approx((2.375, 0.375), abs=1e-12)
    assert table["C"] == pytest.approx((1.25, 0.25), abs=1e-12)
    windowed = M.average_rank(log, window=1)
    assert windowed["C"][0] == 1.5


def test_average_rank_dominant_and_ties():
    rows = []
    for step in (1, 2, 3):
        rows += [("top", 0, step, 10.0, {}), ("x", 0, step, 1.0, {}), ("y", 0, step, 1.0, {})]
    table = M.average_rank(mk(rows))
    assert table["top"][0] == 1.0 and table["x"][0] == table["y"][0] == 2.5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31))
def test_step_rank_sum_property(k, steps, seed):
    rng = np.random.default_rng(seed)
    rows = [(f"m{j}", 0, t, float(rng.integers(0, 3)), {}) for t in range(1, steps + 1) for j in range(k)]
    _, _, ranks = M.step_ranks(mk(rows), 0)
    assert np.allclose(ranks.sum(axis=1), k * (k + 1) / 2)
    assert np.all((ranks >= 1) & (ranks <= k))


def test_normalized_score_single_peaks_at_one():
    log = mk([("A", 0, 1, -5, {}), ("A", 0, 2, -1, {}), ("A", 0, 3, -3, {})])
    steps, curve = M.normalized_score(log, {"": -10})["A"]
    assert curve.max() == 1.0


def test_normalized_score_two_tasks_hand():
    x = mk([("A", 0, 1, 1, {}), ("A", 0, 2, 3, {}), ("A", 1, 1, 3, {}), ("A", 1, 2, 5, {}),
            ("B", 0, 1, 2, {}), ("B", 0, 2, 2, {}), ("B", 1, 1, 2, {}), ("B", 1, 2, 2, {})])
    y = mk([("A", 0, 1, -10, {}), ("A", 0, 2, -6, {}), ("A", 1, 1, -10, {}), ("A", 1, 2, -6, {}),
            ("B", 0, 1, -8, {}), ("B", 0, 2, -8, {}), ("B", 1, 1, -8, {}), ("B", 1, 2, -8, {})])
    out = M.normalized_score({"x": x, "y": y}, {"x": 0, "y": -10})
    assert np.allclose(out["A"][1], [0.25, 1.0]) and np.allclose(out["B"][1], [0.5, 0.5])
    assert list(out["A"][0]) == [1, 2]


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 100), st.integers(0, 2**31))
def test_normalized_score_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    rows = [(m, s, t, float(rng.uniform(-10, -1)), {}) for m in "AB" for s in (0, 1) for t in (1, 2, 3)]
    a = M.normalized_score({"t": mk(rows)}, {"t": -20})
    b = M.normalized_score({"t": mk([(m, s, t, r * c, e) for m, s, t, r, e in rows])}, {"t": -20 * c})
    for m in a:
        assert np.allclose(a[m][1], b[m][1], atol=1e-12)


def test_oracle_curve_scales_steps():
    log = mk([("A", 0, 10, 1, {}), ("A", 0, 20, 2, {}), ("B", 0, 10, 5, {}), ("B", 0, 20, 6, {})])
    method, steps, curve = M.oracle_curve(log)[""]
    assert method == "B" and np.allclose(steps, [11, 22]) and list(curve) == [5, 6]
