"""Dense layers, gradients, optimizer and time encodings.

Everything here is CPU float64. Forward passes are deterministic within a
process; parameters are plain tensors and all update functions are pure
(they return new tensors instead of mutating).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

from .errors import ConfigError, NumericsError, ShapeError

DTYPE = torch.float64

Tensor = torch.Tensor
ParamDict = dict[str, Tensor]


def as_tensor(x) -> Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass
class MlpParams:
    """A stack of dense layers.

    ``layers`` holds (weight, bias) pairs with weight shaped (out, in).
    ``activation`` is "silu" (smooth gate on hidden layers, identity on the
    output layer) or "identity" (a plain linear chain).
    """

    layers: list[tuple[Tensor, Tensor]]
    activation: str = "silu"

    def __post_init__(self):
        if self.activation not in ("silu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise ShapeError("MlpParams needs at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {tuple(w.shape)} / bias {tuple(b.shape)}")
            if i > 0 and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ShapeError(
                    f"layer {i} expects {w.shape[1]} inputs, "
                    f"previous layer emits {self.layers[i - 1][0].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]


def mlp_init(
    dims: Iterable[int],
    rng: np.random.Generator,
    activation: str = "silu",
    zero_last: bool = False,
) -> MlpParams:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    ``zero_last`` zeroes the final layer (used for heads whose initial
    output must be exactly zero).
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ShapeError("need at least an input and an output dimension")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=(fan_out,))
        if zero_last and i == len(dims) - 2:
            w[:] = 0.0
            b[:] = 0.0
        layers.append((as_tensor(w), as_tensor(b)))
    return MlpParams(layers=layers, activation=activation)


def mlp_forward(params: MlpParams, x) -> Tensor:
    """Apply the stack to ``x`` of shape (..., in_dim)."""
    x = as_tensor(x) if not torch.is_tensor(x) else x
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, expected {params.in_dim}")
    n = len(params.layers)
    for i, (w, b) in enumerate(params.layers):
        x = x @ w.transpose(0, 1) + b
        if params.activation == "silu" and i < n - 1:
            x = torch.nn.functional.silu(x)
    return x


def mlp_gradient(params: MlpParams, x, upstream):
    """Reverse-mode gradients of ``upstream . mlp_forward(params, x)``.

    Returns (per-layer (dW, db) list, input gradient).
    """
    x = as_tensor(x).detach().requires_grad_(True)
    upstream = as_tensor(upstream)
    leaves = []
    grad_layers = []
    for w, b in params.layers:
        wl = w.detach().requires_grad_(True)
        bl = b.detach().requires_grad_(True)
        leaves.append((wl, bl))
        grad_layers.extend([wl, bl])
    live = MlpParams(layers=leaves, activation=params.activation)
    y = mlp_forward(live, x)
    if y.shape != upstream.shape:
        raise ShapeError(f"upstream shape {tuple(upstream.shape)} != output {tuple(y.shape)}")
    grads = torch.autograd.grad(y, grad_layers + [x], grad_outputs=upstream)
    param_grads = [(grads[2 * i], grads[2 * i + 1]) for i in range(len(leaves))]
    return param_grads, grads[-1]


def time_encoding(t: int, T: int, dim: int) -> Tensor:
    """Interleaved sin/cos encoding of an integer time step.

    Frequencies decay geometrically (transformer convention); every entry
    lies in [-1, 1].
    """
    if dim % 2 != 0 or dim <= 0:
        raise ShapeError(f"encoding dim must be a positive even integer, got {dim}")
    if not 0 <= t <= T:
        raise ConfigError(f"t={t} outside [0, {T}]")
    half = dim // 2
    freqs = np.power(10000.0, -np.arange(half) / half)
    angles = t * freqs
    enc = np.empty(dim)
    enc[0::2] = np.sin(angles)
    enc[1::2] = np.cos(angles)
    return as_tensor(enc)


# --- optimizer: adaptive moments with decoupled weight decay -----------------


@dataclass
class OptState:
    step: int
    m: ParamDict
    v: ParamDict
    base_lr: float
    total_steps: int
    weight_decay: float = 1e-12
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)); zero at the end."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def init_opt_state(
    params: ParamDict,
    base_lr: float = 1e-4,
    total_steps: int = 1000,
    weight_decay: float = 1e-12,
) -> OptState:
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    zeros = {k: torch.zeros_like(p) for k, p in params.items()}
    return OptState(
        step=0,
        m=zeros,
        v={k: torch.zeros_like(p) for k, p in params.items()},
        base_lr=base_lr,
        total_steps=total_steps,
        weight_decay=weight_decay,
    )


def optimizer_step(state: OptState, params: ParamDict, grads: ParamDict):
    """One decoupled-weight-decay adaptive-moment update.

    Weight decay is applied directly to the parameters (scaled by the
    current learning rate), not mixed into the gradient moments.
    Returns (new state, new params); inputs are left untouched.
    """
    if state.step >= state.total_steps:
        raise ConfigError(f"step {state.step} >= total_steps {state.total_steps}")
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("parameter / gradient / moment names do not match")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"grad shape mismatch for {k!r}")
        if not torch.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for {k!r}")
    lr = cosine_lr(state.base_lr, state.step, state.total_steps)
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_m, new_v, new_p = {}, {}, {}
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
            v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p_new = p - lr * m_hat / (torch.sqrt(v_hat) + state.eps) - lr * state.weight_decay * p
            new_m[k], new_v[k], new_p[k] = m, v, p_new
    new_state = dataclasses.replace(state, step=state.step + 1, m=new_m, v=new_v)
    return new_state, new_p


# --- parameter trees ---------------------------------------------------------
#
# Model containers are nested dataclasses holding MlpParams and raw tensors.
# The helpers below flatten them to a {name: tensor} dict (the unit the
# optimizer and the checkpoint container work with) and rebuild containers
# from an edited dict.


def params_flatten(obj, prefix: str = "") -> ParamDict:
    out: ParamDict = {}
    if torch.is_tensor(obj):
        out[prefix] = obj
    elif isinstance(obj, MlpParams):
        for i, (w, b) in enumerate(obj.layers):
            out[f"{prefix}.{i}.w"] = w
            out[f"{prefix}.{i}.b"] = b
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if _is_param_node(v):
                out.update(params_flatten(v, f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, dict):
        for k, v in obj.items():
            if _is_param_node(v):
                out.update(params_flatten(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            if _is_param_node(v):
                out.update(params_flatten(v, f"{prefix}.{i}" if prefix else str(i)))
    return out


def _is_param_node(v) -> bool:
    return (
        torch.is_tensor(v)
        or isinstance(v, MlpParams)
        or dataclasses.is_dataclass(v)
        or isinstance(v, (list, tuple, dict))
    )


def params_rebuild(obj, mapping: ParamDict, prefix: str = ""):
    """Return a copy of ``obj`` with every tensor replaced from ``mapping``."""
    if torch.is_tensor(obj):
        return mapping[prefix]
    if isinstance(obj, MlpParams):
        layers = [
            (mapping[f"{prefix}.{i}.w"], mapping[f"{prefix}.{i}.b"])
            for i in range(len(obj.layers))
        ]
        return MlpParams(layers=layers, activation=obj.activation)
    if dataclasses.is_dataclass(obj):
        updates = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if _is_param_node(v):
                key = f"{prefix}.{f.name}" if prefix else f.name
                updates[f.name] = params_rebuild(v, mapping, key)
        return dataclasses.replace(obj, **updates)
    if isinstance(obj, dict):
        return {
            k: params_rebuild(v, mapping, f"{prefix}.{k}" if prefix else str(k))
            if _is_param_node(v)
            else v
            for k, v in obj.items()
        }
    if isinstance(obj, (list, tuple)):
        seq = [
            params_rebuild(v, mapping, f"{prefix}.{i}" if prefix else str(i))
            if _is_param_node(v)
            else v
            for i, v in enumerate(obj)
        ]
        return type(obj)(seq)
    return obj
