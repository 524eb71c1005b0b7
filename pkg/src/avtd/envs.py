"""Small deterministic continuous-control tasks.

The functional core is ``env_reset(spec, rng)`` / ``env_step(spec, state, action)``;
``Env`` wraps it with the usual reset/step object interface.  Actions live in
``[-1, 1]^d`` and are clipped before the dynamics.

pendulum
    Swing-up of a rigid rod (gravity 10, mass 1, length 1, torque scale 2,
    dt 0.05, speed clipped to 8).  Observation ``(cos th, sin th, th_dot)``;
    reward ``-(th^2 + 0.1 th_dot^2 + 0.001 u^2)`` with ``u`` the applied torque
    and ``th`` wrapped to ``[-pi, pi)``.  Semi-implicit Euler; with zero torque
    the specific energy ``0.5 th_dot^2 + k cos th`` (``k = 3g/2l``) changes by
    at most ``0.5 dt^2 k (k + th_dot'^2)`` per step.
point_mass
    Unit mass on a plane pushed by a force in ``[-1, 1]^2`` (dt 0.05, velocity
    damping 0.1, position clipped to ``[-2, 2]^2``).  Observation
    ``(x, y, vx, vy)``; reward ``-||pos||``, maximal (0) at the goal.
noisy_pendulum
    ``pendulum`` with 16 standard-normal distractor features appended to every
    observation.  The distractors are a pure function of ``(noise_key, step)``
    so stepping stays bit-exact deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    name: str
    observation_dim: int
    action_dim: int
    horizon: int = 200
    dynamics: dict = field(default_factory=dict)
    reward_bounds: tuple[float, float] = (-math.inf, 0.0)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def return_bounds(self) -> tuple[float, float]:
        lo, hi = self.reward_bounds
        return lo * self.horizon, hi * self.horizon


@dataclass(frozen=True)
class EnvState:
    x: np.ndarray
    step: int = 0
    noise_key: int = 0
    done: bool = False


PENDULUM = dict(g=10.0, m=1.0, l=1.0, dt=0.05, max_torque=2.0, max_speed=8.0)
POINT_MASS = dict(dt=0.05, damping=0.1, arena=2.0)
N_DISTRACTORS = 16


def _pendulum_reward_floor(d):
    return -(math.pi**2 + 0.1 * d["max_speed"] ** 2 + 0.001 * d["max_torque"] ** 2)


def _make_registry() -> dict[str, EnvSpec]:
    pend = EnvSpec("pendulum", 3, 1, 200, dict(PENDULUM), (_pendulum_reward_floor(PENDULUM), 0.0))
    arena = POINT_MASS["arena"]
    pm = EnvSpec("point_mass", 4, 2, 200, dict(POINT_MASS), (-arena * math.sqrt(2.0), 0.0))
    noisy = replace(pend, name="noisy_pendulum", observation_dim=3 + N_DISTRACTORS)
    return {s.name: s for s in (pend, pm, noisy)}


ENV_REGISTRY: dict[str, EnvSpec] = _make_registry()


def make_spec(name: str, **overrides) -> EnvSpec:
    try:
        spec = ENV_REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown environment {name!r}; registered: {sorted(ENV_REGISTRY)}") from None
    return replace(spec, **overrides) if overrides else spec


def angle_normalize(th):
    return ((th + math.pi) % (2 * math.pi)) - math.pi


def _distractors(key: int, step: int) -> np.ndarray:
    return np.random.default_rng([key, step]).standard_normal(N_DISTRACTORS)


def observe(spec: EnvSpec, state: EnvState) -> np.ndarray:
    x = state.x
    if spec.name in ("pendulum", "noisy_pendulum"):
        obs = np.array([math.cos(x[0]), math.sin(x[0]), x[1]])
        if spec.name == "noisy_pendulum":
            obs = np.concatenate([obs, _distractors(state.noise_key, state.step)])
        return obs
    if spec.name == "point_mass":
        return x.copy()
    raise KeyError(spec.name)


def env_reset(spec: EnvSpec, rng: np.random.Generator):
    """Draw an initial state; returns ``(state, observation)``.

    Pendulum variants start with ``th ~ U[-pi, pi]`` and ``th_dot ~ U[-1, 1]``;
    the point mass starts at rest at a position uniform on ``[-1, 1]^2``.
    """
    if spec.name in ("pendulum", "noisy_pendulum"):
        x = np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])
        key = int(rng.integers(2**63)) if spec.name == "noisy_pendulum" else 0
        state = EnvState(x, 0, key)
    elif spec.name == "point_mass":
        state = EnvState(np.concatenate([rng.uniform(-1.0, 1.0, 2), np.zeros(2)]))
    else:
        raise KeyError(spec.name)
    return state, observe(spec, state)


def _pendulum_step(d, x, a):
    th, thdot = float(x[0]), float(x[1])
    u = d["max_torque"] * float(a[0])
    cost = angle_normalize(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2
    thdot = thdot + (3 * d["g"] / (2 * d["l"]) * math.sin(th) + 3.0 / (d["m"] * d["l"] ** 2) * u) * d["dt"]
    thdot = min(max(thdot, -d["max_speed"]), d["max_speed"])
    th = th + thdot * d["dt"]
    return np.array([th, thdot]), -cost


def _point_mass_step(d, x, a):
    pos, vel = x[:2], x[2:]
    reward = -float(np.linalg.norm(pos))
    vel = vel + (a - d["damping"] * vel) * d["dt"]
    pos = np.clip(pos + vel * d["dt"], -d["arena"], d["arena"])
    return np.concatenate([pos, vel]), reward


def env_step(spec: EnvSpec, state: EnvState, action):
    """Advance one step.

    Returns ``(next_state, observation, reward, terminated, truncated)``.  None of
    the bundled tasks has a failure set, so ``terminated`` is always False and
    episodes end by truncation at the horizon.
    """
    if state.done or state.step >= spec.horizon:
        raise RuntimeError("episode is over; call env_reset first")
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(spec.action_dim), -1.0, 1.0)
    if spec.name in ("pendulum", "noisy_pendulum"):
        x, reward = _pendulum_step(spec.dynamics, state.x, a)
    elif spec.name == "point_mass":
        x, reward = _point_mass_step(spec.dynamics, state.x, a)
    else:
        raise KeyError(spec.name)
    step = state.step + 1
    truncated = step == spec.horizon
    terminated = False
    nxt = EnvState(x, step, state.noise_key, truncated or terminated)
    return nxt, observe(spec, nxt), reward, terminated, truncated


def pendulum_energy(spec: EnvSpec, state: EnvState) -> float:
    """Specific mechanical energy conserved by the continuous-time dynamics."""
    d = spec.dynamics
    k = 3 * d["g"] / (2 * d["l"])
    return 0.5 * state.x[1] ** 2 + k * math.cos(state.x[0])


def pendulum_energy_bound(spec: EnvSpec, next_state: EnvState) -> float:
    """Per-step energy error bound of the integrator under zero torque."""
    d = spec.dynamics
    k = 3 * d["g"] / (2 * d["l"])
    return 0.5 * d["dt"] ** 2 * k * (k + next_state.x[1] ** 2)


class Env:
    """Stateful wrapper with ``reset(rng)`` and ``step(action)``."""

    def __init__(self, spec: EnvSpec | str):
        self.spec = make_spec(spec) if isinstance(spec, str) else spec
        self.state: EnvState | None = None

    @property
    def observation_dim(self) -> int:
        return self.spec.observation_dim

    @property
    def action_dim(self) -> int:
        return self.spec.action_dim

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state, obs = env_reset(self.spec, rng)
        return obs

    def step(self, action):
        if self.state is None:
            raise RuntimeError("call reset before step")
        self.state, obs, reward, terminated, truncated = env_step(self.spec, self.state, action)
        return obs, reward, terminated, truncated


def make_env(name: str) -> Env:
    return Env(make_spec(name))
