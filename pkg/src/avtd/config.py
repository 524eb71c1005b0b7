"""Run configuration: INI files with sections, overridable by dotted CLI keys.

Every key is addressed as ``section.key`` (``sac.utd``, ``avtd.pool`` ...).
The same format is written back as the run manifest.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .envs import ENV_REGISTRY
from .pool import SELECTIONS, LoopConfig
from .regularizers import DEFAULT_POOL, RegularizerConfig, parse_preset
from .sac import SacConfig

KINDS = ("online", "avtd", "log_dataset", "offline_stream", "offline_shuffled")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(s).replace(",", " ").split())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x for x in str(s).replace(",", " ").split())


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if str(s).strip().lower() in ("", "none", "auto") else float(s)


def _opt_str(s):
    return None if str(s).strip().lower() in ("", "none") else str(s)


@dataclass(frozen=True)
class RunConfig:
    kind: str = "online"
    env: str = "pendulum"
    seeds: tuple[int, ...] = (0,)
    steps: int = 30_000
    out: str = "runs"
    jobs: int = 1
    # sac
    hidden: tuple[int, ...] = (256, 256)
    discount: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    init_temperature: float = 1.0
    warmup_steps: int = 5000
    utd: int = 1
    policy_delay: int = 1
    backup: str = "entropy"
    target_entropy: float | None = None
    # regularizer of a single-agent run
    reg: str = "plain"
    # model selection
    pool: tuple[str, ...] = DEFAULT_POOL
    selection: str = "valid_td"
    epsilon: float = 0.1
    metric_interval: int = 1
    heldout_every: int = 10
    update_during_heldout: bool = False
    baselines: bool = True
    uniform_baseline: bool = False
    # offline analysis
    dataset: str | None = None
    heldout: str | None = None
    utds: tuple[int, ...] = (1, 9)
    regs: tuple[str, ...] = ()
    # evaluation
    eval_interval: int = 5000
    eval_trials: int = 10
    mc_traj: int = 10
    workers: int = 1

    def __post_init__(self):
        errors = []
        if self.kind not in KINDS:
            errors.append(f"run.kind: {self.kind!r} not in {KINDS}")
        if self.env not in ENV_REGISTRY:
            errors.append(f"run.env: unknown environment {self.env!r}; registered: {sorted(ENV_REGISTRY)}")
        if not self.seeds:
            errors.append("run.seeds: at least one seed is required")
        if self.steps < 0:
            errors.append("run.steps: must be >= 0")
        if self.selection not in SELECTIONS:
            errors.append(f"avtd.selection: {self.selection!r} not in {SELECTIONS}")
        if not 0.0 <= self.epsilon <= 1.0:
            errors.append("avtd.epsilon: must lie in [0, 1]")
        if self.kind == "avtd" and not self.pool:
            errors.append("avtd.pool: at least one preset is required")
        if self.kind.startswith("offline") and not self.utds:
            errors.append("offline.utds: at least one UTD value is required")
        if self.eval_interval < 1:
            errors.append("eval.interval: must be >= 1")
        for name in (self.reg, *self.pool, *self.regs):
            try:
                parse_preset(name)
            except ValueError as e:
                errors.append(f"regularizer preset: {e}")
        try:
            self.sac_config()
        except ValueError as e:
            errors.append(f"sac: {e}")
        if errors:
            raise ValueError("invalid run config:\n  " + "\n  ".join(errors))

    def sac_config(self, reg: str | RegularizerConfig | None = None, **over) -> SacConfig:
        kw = dict(hidden=self.hidden, discount=self.discount, tau=self.tau, lr=self.lr,
                  batch_size=self.batch_size, init_temperature=self.init_temperature,
                  warmup_steps=self.warmup_steps, utd=self.utd, policy_delay=self.policy_delay,
                  backup=self.backup, target_entropy=self.target_entropy,
                  reg=reg if isinstance(reg, RegularizerConfig) else parse_preset(reg or self.reg))
        kw.update(over)
        return SacConfig(**kw)

    def loop_config(self, **over) -> LoopConfig:
        kw = dict(eval_interval=self.eval_interval, eval_trials=self.eval_trials,
                  heldout_every=self.heldout_every, update_during_heldout=self.update_during_heldout,
                  mc_traj=self.mc_traj, workers=self.workers)
        kw.update(over)
        return LoopConfig(**kw)

    def with_(self, **kw) -> RunConfig:
        return replace(self, **kw)


# dotted key -> (field, parser)
KEYS: dict[str, tuple[str, object]] = {
    "run.kind": ("kind", str),
    "run.env": ("env", str),
    "run.seeds": ("seeds", _ints),
    "run.steps": ("steps", int),
    "run.out": ("out", str),
    "run.jobs": ("jobs", int),
    "sac.hidden": ("hidden", _ints),
    "sac.discount": ("discount", float),
    "sac.tau": ("tau", float),
    "sac.lr": ("lr", float),
    "sac.batch_size": ("batch_size", int),
    "sac.init_temperature": ("init_temperature", float),
    "sac.warmup_steps": ("warmup_steps", int),
    "sac.utd": ("utd", int),
    "sac.policy_delay": ("policy_delay", int),
    "sac.backup": ("backup", str),
    "sac.target_entropy": ("target_entropy", _opt_float),
    "reg.preset": ("reg", str),
    "avtd.pool": ("pool", _strs),
    "avtd.selection": ("selection", str),
    "avtd.epsilon": ("epsilon", float),
    "avtd.metric_interval": ("metric_interval", int),
    "avtd.heldout_every": ("heldout_every", int),
    "avtd.update_during_heldout": ("update_during_heldout", _bool),
    "avtd.baselines": ("baselines", _bool),
    "avtd.uniform_baseline": ("uniform_baseline", _bool),
    "offline.dataset": ("dataset", _opt_str),
    "offline.heldout": ("heldout", _opt_str),
    "offline.utds": ("utds", _ints),
    "offline.regs": ("regs", _strs),
    "eval.interval": ("eval_interval", int),
    "eval.trials": ("eval_trials", int),
    "eval.mc_traj": ("mc_traj", int),
    "eval.workers": ("workers", int),
}
_FIELD_TO_KEY = {f: k for k, (f, _) in KEYS.items()}


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    kw = {}
    for key, raw in overrides.items():
        if key not in KEYS:
            raise KeyError(f"unknown config key {key!r}; known keys: {sorted(KEYS)}")
        field, parse = KEYS[key]
        try:
            kw[field] = parse(raw)
        except ValueError as e:
            raise ValueError(f"{key}: cannot parse {raw!r}: {e}") from None
    return replace(cfg, **kw)


def load_config(path) -> dict[str, str]:
    """Read an INI file into ``{dotted_key: raw_value}``."""
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            out[f"{section}.{key}"] = value
    return out


def _render(v) -> str:
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    return "none" if v is None else str(v)


def to_ini(cfg: RunConfig, extra: dict[str, dict[str, str]] | None = None) -> str:
    cp = configparser.ConfigParser()
    for f in fields(cfg):
        section, key = _FIELD_TO_KEY[f.name].split(".")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, _render(getattr(cfg, f.name)))
    for section, items in (extra or {}).items():
        cp.add_section(section)
        for k, v in items.items():
            cp.set(section, k, str(v))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def write_manifest(cfg: RunConfig, path, extra: dict[str, dict[str, str]] | None = None):
    Path(path).write_text(to_ini(cfg, extra))


def read_manifest(path) -> RunConfig:
    raw = load_config(path)
    return apply_overrides(RunConfig(kind=raw.get("run.kind", "online")),
                           {k: v for k, v in raw.items() if k in KEYS})
