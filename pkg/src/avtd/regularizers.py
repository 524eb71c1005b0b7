"""Critic regularizer recipes and the preset-name grammar.

A preset name is a ``+``-joined list of tokens::

    plain | fn | ln | sn | wd[<coef>] | do[<rate>] | droq[<rate>] | reset[<period>[k]] | sabotaged[<std>]

e.g. ``"ln+wd0.01"``, ``"droq0.003"``, ``"reset200k"``.  Bare ``wd``, ``do``,
``droq`` and ``reset`` take the default coefficients (0.01, 0.03, 0.01, 200k).
``sabotaged`` injects Gaussian noise into the critic after every update; it is
a diagnostic for building a deliberately broken pool member, not a regularizer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .nn import MlpSpec, ParamInfo

DEFAULT_WD = 0.01
DEFAULT_DO = 0.03
DEFAULT_DROQ = 0.01
DEFAULT_RESET = 200_000
DEFAULT_SABOTAGE = 0.02


@dataclass(frozen=True)
class RegularizerConfig:
    feature_norm: bool = False
    layer_norm: bool = False
    weight_decay: float = 0.0
    spectral_norm: bool = False
    dropout_rate: float = 0.0
    reset_period: int | None = None
    critic_noise: float = 0.0

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.reset_period is not None and self.reset_period < 1:
            raise ValueError("reset_period must be a positive step count")
        if self.critic_noise < 0:
            raise ValueError("critic_noise must be >= 0")

    @property
    def is_droq(self) -> bool:
        return self.layer_norm and self.dropout_rate > 0

    @property
    def name(self) -> str:
        return preset_name(self)


PLAIN = RegularizerConfig()

STANDARD_PRESETS = ("plain", "fn", "ln", "wd0.01", "sn", "do0.03", "droq0.01", "reset200k", "ln+wd0.01")
# pool used for the headline model-selection experiment
DEFAULT_POOL = ("ln", "ln+wd0.01", "wd0.01", "ln+do0.03", "ln+do0.01")
DROQ_POOL = ("droq0.1", "droq0.03", "droq0.01", "droq0.003", "droq0.0")

_TOKEN = re.compile(r"^(plain|fn|ln|sn|wd|do|droq|reset|sabotaged)([0-9.e-]*)(k?)$")


def parse_preset(name: str) -> RegularizerConfig:
    """Turn a preset string into a RegularizerConfig."""
    kw: dict = {}
    for tok in name.strip().lower().split("+"):
        m = _TOKEN.match(tok.strip())
        if not m:
            raise ValueError(f"unknown regularizer token {tok!r} in preset {name!r}")
        kind, num, kilo = m.groups()
        if kilo and kind != "reset":
            raise ValueError(f"'k' suffix only applies to reset periods: {tok!r}")
        if num and kind in ("plain", "fn", "ln", "sn"):
            raise ValueError(f"{kind!r} takes no argument: {tok!r}")
        value = float(num) if num else None
        if kind == "fn":
            kw["feature_norm"] = True
        elif kind == "ln":
            kw["layer_norm"] = True
        elif kind == "sn":
            kw["spectral_norm"] = True
        elif kind == "wd":
            kw["weight_decay"] = DEFAULT_WD if value is None else value
        elif kind == "do":
            kw["dropout_rate"] = DEFAULT_DO if value is None else value
        elif kind == "droq":
            kw["layer_norm"] = True
            kw["dropout_rate"] = DEFAULT_DROQ if value is None else value
        elif kind == "reset":
            period = DEFAULT_RESET if value is None else value * (1000 if kilo else 1)
            kw["reset_period"] = int(period)
        elif kind == "sabotaged":
            kw["critic_noise"] = DEFAULT_SABOTAGE if value is None else value
    return RegularizerConfig(**kw)


def _fmt(x: float) -> str:
    return f"{x:g}"


def preset_name(reg: RegularizerConfig) -> str:
    """Canonical preset string; ``parse_preset(preset_name(r)) == r``."""
    toks = []
    if reg.feature_norm:
        toks.append("fn")
    if reg.layer_norm:
        toks.append("ln")
    if reg.spectral_norm:
        toks.append("sn")
    if reg.weight_decay:
        toks.append("wd" + _fmt(reg.weight_decay))
    if reg.dropout_rate:
        toks.append("do" + _fmt(reg.dropout_rate))
    if reg.reset_period is not None:
        p = reg.reset_period
        toks.append(f"reset{p // 1000}k" if p % 1000 == 0 else f"reset{p}")
    if reg.critic_noise:
        toks.append("sabotaged" + _fmt(reg.critic_noise))
    return "+".join(toks) or "plain"


def build_critic_spec(reg: RegularizerConfig, base_widths, init_gain: float | None = None) -> MlpSpec:
    """Critic architecture with the configured normalization and dropout placements."""
    widths = tuple(base_widths)
    n_hidden = len(widths) - 2
    kw = {} if init_gain is None else {"init_gain": init_gain}
    return MlpSpec(widths,
                   layer_norm=(reg.layer_norm,) * n_hidden,
                   dropout_rate=(reg.dropout_rate,) * n_hidden,
                   feature_norm=reg.feature_norm,
                   spectral_norm_penultimate=reg.spectral_norm,
                   **kw)


def build_decay_mask(reg: RegularizerConfig, param_layout: list[ParamInfo]) -> dict[str, bool]:
    """Weight decay applies to hidden weight matrices only."""
    mask = {}
    for info in param_layout:
        if info.kind == "weight":
            mask[info.name] = not info.is_final
        elif info.kind in ("bias", "ln_scale", "ln_bias"):
            mask[info.name] = False
        else:
            raise ValueError(f"unknown parameter kind {info.kind!r} for {info.name}")
    return mask


def reset_due(reg: RegularizerConfig, env_step: int) -> bool:
    if env_step < 0:
        raise ValueError("env_step must be >= 0")
    return reg.reset_period is not None and env_step > 0 and env_step % reg.reset_period == 0
