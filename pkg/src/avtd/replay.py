"""Replay storage, the held-out validation store, streaming replay of logged
data, and the binary dataset format.

Dataset file layout (all little-endian)::

    magic   4 bytes  b"AVTD"
    version u16      (1)
    obs_dim u32
    act_dim u32
    count   u64
    count records of: obs f64[obs_dim], action f64[act_dim], reward f64,
                      next_obs f64[obs_dim], terminated u8, truncated u8
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

DEFAULT_CAPACITY = 1_000_000
MAGIC = b"AVTD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIQ")


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    terminated: bool = False
    truncated: bool = False

    def __post_init__(self):
        if self.terminated and self.truncated:
            raise ValueError("a transition cannot be both terminated and truncated")


@dataclass
class Batch:
    """Column-stacked transitions; also the in-memory form of a dataset."""

    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)

    def __getitem__(self, idx) -> Batch:
        return Batch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx],
                     self.terminated[idx], self.truncated[idx])

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.action.shape[1]

    @classmethod
    def empty(cls, obs_dim: int, act_dim: int) -> Batch:
        return cls(np.zeros((0, obs_dim)), np.zeros((0, act_dim)), np.zeros(0),
                   np.zeros((0, obs_dim)), np.zeros(0, bool), np.zeros(0, bool))

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], obs_dim: int | None = None,
                         act_dim: int | None = None) -> Batch:
        if len(transitions) == 0:
            if obs_dim is None or act_dim is None:
                raise ValueError("dimensions are needed to build an empty batch")
            return cls.empty(obs_dim, act_dim)
        return cls(np.array([t.obs for t in transitions], dtype=np.float64),
                   np.array([np.atleast_1d(t.action) for t in transitions], dtype=np.float64),
                   np.array([t.reward for t in transitions], dtype=np.float64),
                   np.array([t.next_obs for t in transitions], dtype=np.float64),
                   np.array([t.terminated for t in transitions], dtype=bool),
                   np.array([t.truncated for t in transitions], dtype=bool))

    def transitions(self) -> list[Transition]:
        return [Transition(self.obs[i], self.action[i], float(self.reward[i]), self.next_obs[i],
                           bool(self.terminated[i]), bool(self.truncated[i])) for i in range(len(self))]

    @staticmethod
    def concat(batches: Iterable[Batch]) -> Batch:
        bs = list(batches)
        return Batch(*(np.concatenate([getattr(b, f) for b in bs]) for f in
                       ("obs", "action", "reward", "next_obs", "terminated", "truncated")))


class _Store:
    """Growable column storage shared by the replay and held-out buffers."""

    def __init__(self, obs_dim: int, act_dim: int, initial: int = 1024):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self._alloc(initial)

    def _alloc(self, n):
        self._obs = np.zeros((n, self.obs_dim))
        self._act = np.zeros((n, self.act_dim))
        self._rew = np.zeros(n)
        self._next = np.zeros((n, self.obs_dim))
        self._term = np.zeros(n, bool)
        self._trunc = np.zeros(n, bool)

    def _grow(self, n):
        old = (self._obs, self._act, self._rew, self._next, self._term, self._trunc)
        k = len(self._rew)
        self._alloc(n)
        for new, o in zip((self._obs, self._act, self._rew, self._next, self._term, self._trunc), old):
            new[:k] = o

    def _write(self, i: int, t: Transition):
        obs = np.asarray(t.obs, dtype=np.float64)
        act = np.atleast_1d(np.asarray(t.action, dtype=np.float64))
        nxt = np.asarray(t.next_obs, dtype=np.float64)
        if obs.shape != (self.obs_dim,) or nxt.shape != (self.obs_dim,) or act.shape != (self.act_dim,):
            raise ValueError("transition dimensions do not match the buffer")
        self._obs[i] = obs
        self._act[i] = act
        self._rew[i] = t.reward
        self._next[i] = nxt
        self._term[i] = t.terminated
        self._trunc[i] = t.truncated

    def _gather(self, idx) -> Batch:
        return Batch(self._obs[idx], self._act[idx], self._rew[idx], self._next[idx],
                     self._term[idx], self._trunc[idx])


class ReplayBuffer(_Store):
    """FIFO ring buffer sampled uniformly with replacement."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        super().__init__(obs_dim, act_dim, min(capacity, 1024))
        self.capacity = capacity
        self.cursor = 0
        self.size = 0
        self.sample_calls = 0

    def __len__(self) -> int:
        return self.size

    def append(self, t: Transition):
        if self.size < self.capacity and self.size == len(self._rew):
            self._grow(min(2 * len(self._rew), self.capacity))
        self._write(self.cursor, t)
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, batch: Batch):
        for t in batch.transitions():
            self.append(t)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        self.sample_calls += 1
        return self._gather(self.sample_indices(batch_size, rng))

    def contents(self) -> Batch:
        """All stored transitions, oldest first."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (np.arange(self.size) + self.cursor) % self.capacity
        return self._gather(idx)


class HeldoutBuffer(_Store):
    """Append-only validation store.

    There is deliberately no ``sample`` method: training code cannot draw
    minibatches from it.  ``reads`` counts every access to the contents.
    """

    def __init__(self, obs_dim: int, act_dim: int):
        super().__init__(obs_dim, act_dim)
        self.size = 0
        self.reads = 0

    def __len__(self) -> int:
        return self.size

    def append(self, t: Transition):
        if self.size == len(self._rew):
            self._grow(2 * len(self._rew))
        self._write(self.size, t)
        self.size += 1

    def extend(self, batch: Batch):
        for t in batch.transitions():
            self.append(t)

    def contents(self) -> Batch:
        self.reads += 1
        return self._gather(slice(0, self.size))


def buffer_append(buffer, transition: Transition):
    buffer.append(transition)


def buffer_sample(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Batch:
    return buffer.sample(batch_size, rng)


class StreamSchedule:
    """Reveals a logged dataset into a buffer a few transitions at a time.

    ``in_order`` replays collection order; ``shuffled`` replays a permutation
    fixed at construction from ``seed``.
    """

    def __init__(self, dataset: Batch, mode: Literal["in_order", "shuffled"] = "in_order", seed: int = 0):
        if mode not in ("in_order", "shuffled"):
            raise ValueError(f"unknown stream mode {mode!r}")
        self.dataset = dataset
        self.mode = mode
        self.seed = seed
        n = len(dataset)
        self.order = np.arange(n) if mode == "in_order" else np.random.default_rng(seed).permutation(n)
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.dataset)

    @property
    def remaining(self) -> int:
        return len(self.dataset) - self.cursor

    def reveal(self, buffer, n_steps: int = 1):
        if self.cursor + n_steps > len(self.dataset):
            raise IndexError(f"dataset exhausted: {self.remaining} transitions left, {n_steps} requested")
        d = self.dataset
        for i in self.order[self.cursor:self.cursor + n_steps]:
            buffer.append(Transition(d.obs[i], d.action[i], float(d.reward[i]), d.next_obs[i],
                                     bool(d.terminated[i]), bool(d.truncated[i])))
        self.cursor += n_steps


def stream_reveal(schedule: StreamSchedule, buffer, n_steps: int = 1):
    schedule.reveal(buffer, n_steps)


def _record_dtype(obs_dim: int, act_dim: int) -> np.dtype:
    return np.dtype([("obs", "<f8", (obs_dim,)), ("action", "<f8", (act_dim,)), ("reward", "<f8"),
                     ("next_obs", "<f8", (obs_dim,)), ("terminated", "u1"), ("truncated", "u1")])


class DatasetFormatError(ValueError):
    pass


def dataset_save(data: Batch | Sequence[Transition], path, obs_dim: int | None = None,
                 act_dim: int | None = None):
    batch = data if isinstance(data, Batch) else Batch.from_transitions(data, obs_dim, act_dim)
    dt = _record_dtype(batch.obs_dim, batch.act_dim)
    rec = np.zeros(len(batch), dtype=dt)
    rec["obs"] = batch.obs
    rec["action"] = batch.action
    rec["reward"] = batch.reward
    rec["next_obs"] = batch.next_obs
    rec["terminated"] = batch.terminated
    rec["truncated"] = batch.truncated
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, batch.obs_dim, batch.act_dim, len(batch)))
        fh.write(rec.tobytes())


def dataset_load(path, obs_dim: int | None = None, act_dim: int | None = None) -> Batch:
    """Read a dataset file.  Optional dimensions are checked against the header."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{os.fspath(path)}: truncated header at byte offset {len(raw)}"
                                 f" (need {_HEADER.size} bytes)")
    magic, version, od, ad, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{os.fspath(path)}: bad magic {magic!r} at byte offset 0")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{os.fspath(path)}: unsupported version {version} at byte offset 4")
    if (obs_dim is not None and od != obs_dim) or (act_dim is not None and ad != act_dim):
        raise DatasetFormatError(f"{os.fspath(path)}: header dims (obs={od}, act={ad}) do not match"
                                 f" expected (obs={obs_dim}, act={act_dim})")
    dt = _record_dtype(od, ad)
    need = _HEADER.size + count * dt.itemsize
    if len(raw) != need:
        if len(raw) < need:
            full = (len(raw) - _HEADER.size) // dt.itemsize
            offset = _HEADER.size + full * dt.itemsize
            raise DatasetFormatError(f"{os.fspath(path)}: truncated record {full} at byte offset {offset}"
                                     f" (file has {len(raw)} bytes, header promises {need})")
        raise DatasetFormatError(f"{os.fspath(path)}: {len(raw) - need} trailing bytes at byte offset {need}")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=_HEADER.size)
    return Batch(rec["obs"].copy(), rec["action"].copy(), rec["reward"].copy(), rec["next_obs"].copy(),
                 rec["terminated"].astype(bool), rec["truncated"].astype(bool))
