"""Dense MLPs with hand-written reverse mode, plus the AdamW optimizer.

Weights use the row-vector convention ``y = x @ W + b`` with ``W`` of shape
``(fan_in, fan_out)``.  Every hidden block is

    Dense -> [Dropout] -> [LayerNorm] -> ReLU

and the output block is ``[FeatureNorm] -> Dense``.  Spectral normalization,
when enabled, rescales the weight of the last hidden Dense (the penultimate
linear map of the network).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

LN_EPS = 1e-5
FN_EPS = 1e-8
SN_EPS = 1e-12

ParamKind = Literal["weight", "bias", "ln_scale", "ln_bias"]


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a ReLU MLP and the placement of its regularizers.

    ``layer_norm`` and ``dropout_rate`` accept either a scalar (applied to
    every hidden layer) or one entry per hidden layer.
    """

    layer_widths: tuple[int, ...]
    layer_norm: tuple[bool, ...] | bool = False
    dropout_rate: tuple[float, ...] | float = 0.0
    feature_norm: bool = False
    spectral_norm_penultimate: bool = False
    init_gain: float = math.sqrt(2.0)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 3:
            raise ValueError("an MLP needs an input, at least one hidden layer and an output")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        n_hidden = len(widths) - 2
        ln = self.layer_norm
        ln = (bool(ln),) * n_hidden if isinstance(ln, (bool, np.bool_)) else tuple(bool(v) for v in ln)
        do = self.dropout_rate
        do = (float(do),) * n_hidden if np.isscalar(do) else tuple(float(v) for v in do)
        if len(ln) != n_hidden or len(do) != n_hidden:
            raise ValueError("layer_norm / dropout_rate need one entry per hidden layer")
        for rate in do:
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        if self.init_gain <= 0:
            raise ValueError("init_gain must be positive")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "layer_norm", ln)
        object.__setattr__(self, "dropout_rate", do)

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def n_dense(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def sn_layer(self) -> int | None:
        """Index of the Dense layer whose weight is spectrally normalized."""
        return self.n_dense - 2 if self.spectral_norm_penultimate else None


@dataclass(frozen=True)
class ParamInfo:
    name: str
    kind: ParamKind
    layer: int
    is_final: bool


def param_layout(spec: MlpSpec) -> list[ParamInfo]:
    """Enumerate every trainable parameter of ``spec`` in a fixed order."""
    layout = []
    for i in range(spec.n_dense):
        final = i == spec.n_dense - 1
        layout.append(ParamInfo(f"dense{i}.weight", "weight", i, final))
        layout.append(ParamInfo(f"dense{i}.bias", "bias", i, final))
        if not final and spec.layer_norm[i]:
            layout.append(ParamInfo(f"ln{i}.scale", "ln_scale", i, False))
            layout.append(ParamInfo(f"ln{i}.bias", "ln_bias", i, False))
    return layout


def orthogonal_init(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Random matrix with orthonormal columns (or rows, if wide) scaled by ``gain``."""
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init needs rows, cols >= 1")
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    # sign fix makes the draw Haar-distributed
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    if rows < cols:
        q = q.T
    return gain * q


class ParamSet:
    """Trainable parameters of one MLP, their gradient slots, and SN state."""

    def __init__(self, spec: MlpSpec, params: dict[str, np.ndarray], sn_u: np.ndarray | None = None):
        self.spec = spec
        self.params = params
        self.grads = {k: np.zeros_like(v) for k, v in params.items()}
        self.sn_u = sn_u
        self.version = 0

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> ParamSet:
        params = {}
        w = spec.layer_widths
        for i in range(spec.n_dense):
            params[f"dense{i}.weight"] = orthogonal_init(w[i], w[i + 1], spec.init_gain, rng)
            params[f"dense{i}.bias"] = np.zeros(w[i + 1])
            if i < spec.n_hidden and spec.layer_norm[i]:
                params[f"ln{i}.scale"] = np.ones(w[i + 1])
                params[f"ln{i}.bias"] = np.zeros(w[i + 1])
        sn_u = None
        if spec.sn_layer is not None:
            u = rng.standard_normal(w[spec.sn_layer])
            sn_u = u / np.linalg.norm(u)
        return cls(spec, params, sn_u)

    def copy(self) -> ParamSet:
        out = ParamSet(self.spec, {k: v.copy() for k, v in self.params.items()},
                       None if self.sn_u is None else self.sn_u.copy())
        return out

    def layout(self) -> list[ParamInfo]:
        return param_layout(self.spec)

    def touch(self):
        """Mark parameters as modified; tapes recorded earlier become stale."""
        self.version += 1

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass(frozen=True)
class ForwardMode:
    """Train phase enables dropout and advances the SN power iteration."""

    phase: Literal["train", "eval"] = "eval"
    rng: np.random.Generator | None = None

    @classmethod
    def train(cls, rng: np.random.Generator) -> ForwardMode:
        return cls("train", rng)

    @classmethod
    def eval(cls) -> ForwardMode:
        return cls("eval", None)

    @property
    def training(self) -> bool:
        return self.phase == "train"


EVAL = ForwardMode.eval()


@dataclass
class Tape:
    """Intermediates of one forward pass, enough for exact reverse mode."""

    spec: MlpSpec
    owner: int
    version: int
    inputs: list = field(default_factory=list)     # input to each Dense
    dropout_masks: list = field(default_factory=list)
    ln_xhat: list = field(default_factory=list)
    ln_std: list = field(default_factory=list)
    relu_active: list = field(default_factory=list)
    fn_norm: float | np.ndarray | None = None
    fn_clamped: np.ndarray | None = None
    sn: tuple | None = None                         # (W_raw, u, v, sigma)


def spectral_normalize(weight: np.ndarray, u: np.ndarray):
    """One power-iteration step; returns ``(weight / sigma, u_next, sigma)``.

    ``u`` lives in the row space of ``weight`` (length ``weight.shape[0]``).
    """
    if weight.ndim != 2:
        raise ValueError("spectral_normalize expects a 2-D weight")
    v = weight.T @ u
    v_norm = np.linalg.norm(v)
    if v_norm < SN_EPS:
        raise FloatingPointError("spectral norm estimate vanished (zero matrix?)")
    v = v / v_norm
    u_next = weight @ v
    u_norm = np.linalg.norm(u_next)
    if u_norm < SN_EPS:
        raise FloatingPointError("spectral norm estimate vanished (zero matrix?)")
    u_next = u_next / u_norm
    sigma = float(u_next @ weight @ v)
    if sigma < SN_EPS:
        raise FloatingPointError("spectral norm estimate vanished (zero matrix?)")
    return weight / sigma, u_next, sigma


def _sn_power_vectors(weight: np.ndarray, u: np.ndarray):
    _, u_next, sigma = spectral_normalize(weight, u)
    v = weight.T @ u
    return u_next, v / np.linalg.norm(v), sigma


def dropout_apply(x: np.ndarray, rate: float, mode: ForwardMode, rng=None):
    """Inverted dropout.  Returns ``(y, mask)``; ``mask`` is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not mode.training or rate == 0.0:
        return x, None
    rng = rng if rng is not None else mode.rng
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def mlp_forward(spec: MlpSpec, params: ParamSet, x: np.ndarray, mode: ForwardMode = EVAL):
    """Run the network on a ``(batch, in_dim)`` array; returns ``(out, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(f"expected input of shape (batch, {spec.in_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite network input")
    if params.spec != spec:
        raise ValueError("parameter set was built for a different MlpSpec")
    p = params.params
    tape = Tape(spec, id(params), params.version)
    h = x
    for i in range(spec.n_hidden):
        tape.inputs.append(h)
        w = p[f"dense{i}.weight"]
        if i == spec.sn_layer:
            u_next, v, sigma = _sn_power_vectors(w, params.sn_u)
            tape.sn = (w, u_next, v, sigma)
            w = w / sigma
            if mode.training:
                params.sn_u = u_next
        z = h @ w + p[f"dense{i}.bias"]
        z, mask = dropout_apply(z, spec.dropout_rate[i], mode)
        tape.dropout_masks.append(mask)
        if spec.layer_norm[i]:
            mu = z.mean(axis=1, keepdims=True)
            std = np.sqrt(z.var(axis=1, keepdims=True) + LN_EPS)
            xhat = (z - mu) / std
            tape.ln_xhat.append(xhat)
            tape.ln_std.append(std)
            z = xhat * p[f"ln{i}.scale"] + p[f"ln{i}.bias"]
        else:
            tape.ln_xhat.append(None)
            tape.ln_std.append(None)
        active = z > 0
        tape.relu_active.append(active)
        h = z * active
    if spec.feature_norm:
        norm = np.linalg.norm(h, axis=1, keepdims=True)
        clamped = norm < FN_EPS
        norm = np.maximum(norm, FN_EPS)
        tape.fn_norm, tape.fn_clamped = norm, clamped
        h = h / norm
    last = spec.n_dense - 1
    tape.inputs.append(h)
    out = h @ p[f"dense{last}.weight"] + p[f"dense{last}.bias"]
    return out, tape


def mlp_backward(spec: MlpSpec, params: ParamSet, tape: Tape, output_grad: np.ndarray,
                 param_grads: bool = True):
    """Reverse pass.  Returns ``(param_grads, input_grad)`` and fills ``params.grads``.

    With ``param_grads=False`` only the input gradient is computed (the
    returned dict is empty and ``params.grads`` is left alone).
    """
    if tape.spec != spec or tape.owner != id(params):
        raise ValueError("tape was recorded for a different network")
    if tape.version != params.version:
        raise ValueError("stale tape: parameters changed since the forward pass")
    g = np.asarray(output_grad, dtype=np.float64)
    p = params.params
    grads: dict[str, np.ndarray] = {}
    last = spec.n_dense - 1
    h = tape.inputs[last]
    if g.shape != (h.shape[0], spec.out_dim):
        raise ValueError(f"output_grad shape {g.shape} does not match forward output")
    if param_grads:
        grads[f"dense{last}.weight"] = h.T @ g
        grads[f"dense{last}.bias"] = g.sum(axis=0)
    g = g @ p[f"dense{last}.weight"].T
    if spec.feature_norm:
        # d(h/n)/dh = (I - f f^T)/n away from the clamp
        fhat = h
        radial = np.sum(fhat * g, axis=1, keepdims=True)
        g = np.where(tape.fn_clamped, g, g - fhat * radial) / tape.fn_norm
    for i in reversed(range(spec.n_hidden)):
        g = g * tape.relu_active[i]
        if spec.layer_norm[i]:
            xhat, std = tape.ln_xhat[i], tape.ln_std[i]
            if param_grads:
                grads[f"ln{i}.scale"] = np.sum(g * xhat, axis=0)
                grads[f"ln{i}.bias"] = g.sum(axis=0)
            gx = g * p[f"ln{i}.scale"]
            g = (gx - gx.mean(axis=1, keepdims=True)
                 - xhat * np.mean(gx * xhat, axis=1, keepdims=True)) / std
        if tape.dropout_masks[i] is not None:
            g = g * tape.dropout_masks[i]
        x_in = tape.inputs[i]
        if i == spec.sn_layer:
            w_raw, u, v, sigma = tape.sn
            if param_grads:
                g_hat = x_in.T @ g
                # sigma = u^T W v with u, v held fixed
                grads[f"dense{i}.weight"] = g_hat / sigma - (np.sum(g_hat * w_raw) / sigma**2) * np.outer(u, v)
            w_eff = w_raw / sigma
        else:
            if param_grads:
                grads[f"dense{i}.weight"] = x_in.T @ g
            w_eff = p[f"dense{i}.weight"]
        if param_grads:
            grads[f"dense{i}.bias"] = g.sum(axis=0)
        g = g @ w_eff.T
    if param_grads:
        params.grads = grads
    return grads, g


@dataclass
class AdamState:
    """Adam moments plus decoupled weight decay restricted by ``mask``."""

    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    mask: dict[str, bool] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0,
                   mask: dict[str, bool] | None = None, **kw) -> AdamState:
        mask = {k: False for k in params} if mask is None else dict(mask)
        missing = set(params) - set(mask)
        if missing:
            raise ValueError(f"decay mask lacks entries for {sorted(missing)}")
        return cls(lr=lr, weight_decay=weight_decay, mask=mask,
                   m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adamw_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """In-place AdamW update of ``params``.  Decay uses the pre-update value."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    decay = 1.0 - state.lr * state.weight_decay
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p = params[k]
        if state.weight_decay and state.mask[k]:
            p *= decay
        p -= step
    return params, state


def optimizer_step(state: AdamState, net: ParamSet, grads: dict[str, np.ndarray]):
    """AdamW on a ParamSet; invalidates outstanding tapes."""
    adamw_step(state, net.params, grads)
    net.touch()


def sum_grads(parts: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Sum gradient dicts key-wise (for losses that call one net several times)."""
    out = {k: v.copy() for k, v in parts[0].items()}
    for part in parts[1:]:
        for k, v in part.items():
            out[k] += v
    return out
