"""Dense tensor primitives with hand-written backward passes, losses and AdamW.

Tensors are plain ``numpy.ndarray`` objects. Layer functions return
``(output, cache)`` and each has a matching ``*_backward(grad_out, cache)``.
Layers accept any number of leading batch axes; the last axis is the feature
axis. Nothing here keeps global mutable state.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidGateError, LabelIndexError, TrainingDivergence

Tensor = np.ndarray

FP64_ENV = "MOVEKIT_FP64"
LN_EPS = 1e-5
MASK = -np.inf


def float_dtype() -> np.dtype:
    """Training dtype: float32 unless ``MOVEKIT_FP64`` is set to a truthy value."""
    flag = os.environ.get(FP64_ENV, "").strip().lower()
    return np.dtype(np.float64) if flag in {"1", "true", "yes", "on"} else np.dtype(np.float32)


# ---------------------------------------------------------------------------
# Basic arithmetic
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a fixed left-to-right accumulation over the inner axis.

    The result is bit-identical to a naive triple loop that starts from 0.0
    and adds ``a[i, p] * b[p, j]`` for p = 0, 1, ..., k-1.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for p in range(a.shape[1]):
        out += np.multiply.outer(a[:, p], b[p, :])
    return out


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; entries equal to ``MASK`` (-inf) map to exactly 0."""
    x = np.asarray(logits)
    if x.size == 0:
        raise DimensionError("softmax: empty input")
    masked = np.isneginf(x)
    if masked.all(axis=axis).any():
        raise InvalidGateError("softmax: every entry is masked")
    top = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - top)
    # summing in sorted order makes the result exactly permutation-equivariant
    return e / np.sort(e, axis=axis).sum(axis=axis, keepdims=True)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    x = np.asarray(logits)
    top = np.max(x, axis=axis, keepdims=True)
    shifted = x - top
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, label: int) -> tuple[float, Tensor]:
    """Loss ``-log softmax(logits)[label]`` and its gradient w.r.t. ``logits``."""
    z = np.asarray(logits)
    if z.ndim != 1:
        raise DimensionError(f"cross_entropy: expected a vector, got shape {z.shape}")
    if not 0 <= label < z.shape[0]:
        raise LabelIndexError(f"cross_entropy: label {label} outside [0, {z.shape[0]})")
    loss = -float(log_softmax(z)[label])
    grad = softmax(z)
    grad[label] -= 1.0
    return loss, grad


def cross_entropy_rows(
    logits: Tensor, labels: Tensor, weights: Tensor | None = None
) -> tuple[float, Tensor]:
    """Weighted mean cross-entropy over the rows of ``logits`` (N, C).

    ``weights`` defaults to all ones; the mean is taken over the weight sum.
    """
    z = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy_rows: logits {z.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise LabelIndexError("cross_entropy_rows: label out of range")
    w = np.ones(z.shape[0], dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    total = w.sum()
    if total <= 0:
        raise DimensionError("cross_entropy_rows: zero total weight")
    rows = np.arange(z.shape[0])
    logp = log_softmax(z)
    loss = float(-(w * logp[rows, labels]).sum() / total)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class ParamState:
    value: Tensor
    grad: Tensor | None = None
    m: Tensor | None = None
    v: Tensor | None = None
    step: int = 0
    name: str = ""
    decay: bool = True

    def __post_init__(self) -> None:
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


def adamw_step(state: ParamState, cfg: OptimizerConfig) -> ParamState:
    """One in-place AdamW update with decoupled weight decay.

    The decay multiplies the value directly and never enters the moments.
    """
    g = state.grad
    if g.shape != state.value.shape:
        raise DimensionError(f"adamw_step: grad {g.shape} vs value {state.value.shape} for {state.name!r}")
    if not np.all(np.isfinite(g)):
        raise TrainingDivergence(f"non-finite gradient for parameter {state.name!r}", param=state.name)
    state.step += 1
    lr = cfg.learning_rate
    if state.decay and cfg.weight_decay:
        state.value *= 1.0 - lr * cfg.weight_decay
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * g
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * (g * g)
    m_hat = state.m / (1.0 - cfg.beta1**state.step)
    v_hat = state.v / (1.0 - cfg.beta2**state.step)
    state.value -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return state


def no_decay(name: str) -> bool:
    """Biases and norm gains/shifts are excluded from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b") or leaf.startswith("ln_")


class AdamW:
    """AdamW over a dict of named arrays, updated in place.

    Only parameters that receive a gradient in a call to :meth:`step` move;
    absent names keep their value and moment state untouched.
    """

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig):
        self.cfg = cfg
        self.states = {
            name: ParamState(value=arr, name=name, decay=not no_decay(name)) for name, arr in params.items()
        }

    def step(self, grads: dict[str, Tensor]) -> list[str]:
        unknown = set(grads) - set(self.states)
        if unknown:
            raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
        for name in sorted(grads):
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(f"non-finite gradient for parameter {name!r}", param=name)
        updated = []
        for name in sorted(grads):
            st = self.states[name]
            st.grad = np.asarray(grads[name], dtype=st.value.dtype)
            adamw_step(st, self.cfg)
            updated.append(name)
        return updated


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float64) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def linear_layer(x: Tensor, weights: Tensor, bias: Tensor | None = None):
    """``y = x @ W + b`` over the last axis of ``x``."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise DimensionError(f"linear_layer: input {x.shape} vs weights {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise DimensionError(f"linear_layer: bias {bias.shape} vs weights {weights.shape}")
    y = x @ weights
    if bias is not None:
        y = y + bias
    return y, (x, weights, bias is not None)


def linear_layer_backward(dy: Tensor, cache):
    """Returns ``(dx, dW, db)``; ``db`` is None when the layer had no bias."""
    x, w, has_bias = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    return dx, dw, db


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LN_EPS):
    d = x.shape[-1]
    if d < 2 or gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape}, gain {gain.shape}, shift {shift.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + shift, (xhat, rstd, gain)


def layer_norm_backward(dy: Tensor, cache):
    """Returns ``(dx, dgain, dshift)``."""
    xhat, rstd, gain = cache
    d = xhat.shape[-1]
    dxhat = dy * gain
    dx = rstd * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    dshift = dy.reshape(-1, d).sum(axis=0)
    return dx, dgain, dshift


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor):
    """Tanh-approximated GELU."""
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy: Tensor, cache) -> Tensor:
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

ATTN_KEYS = ("ln_gain", "ln_shift", "wq", "wk", "wv", "wo")


def init_attention(rng: np.random.Generator, d: int, dtype=np.float64) -> dict[str, Tensor]:
    return {
        "ln_gain": np.ones(d, dtype=dtype),
        "ln_shift": np.zeros(d, dtype=dtype),
        "wq": glorot(rng, d, d, dtype=dtype),
        "wk": glorot(rng, d, d, dtype=dtype),
        "wv": glorot(rng, d, d, dtype=dtype),
        "wo": glorot(rng, d, d, dtype=dtype),
    }


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, n_heads, d // n_heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, t, h * dh)


def causal_mask(t: int) -> Tensor:
    """(t, t) additive mask: 0 on and below the diagonal, -inf above."""
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = MASK
    return m


def attention_block(x: Tensor, params: dict[str, Tensor], causal: bool = False, n_heads: int = 1):
    """Pre-norm residual self-attention: ``x + Attn(LN(x))``."""
    d = x.shape[-1]
    if d % n_heads:
        raise DimensionError(f"attention_block: width {d} not divisible by {n_heads} heads")
    if params["wq"].shape != (d, d):
        raise DimensionError(f"attention_block: input {x.shape} vs projection {params['wq'].shape}")
    h, ln_cache = layer_norm(x, params["ln_gain"], params["ln_shift"])
    q = _split_heads(h @ params["wq"], n_heads)
    k = _split_heads(h @ params["wk"], n_heads)
    v = _split_heads(h @ params["wv"], n_heads)
    scale = 1.0 / math.sqrt(d // n_heads)
    scores = (q @ k.swapaxes(-1, -2)) * scale
    if causal:
        scores = scores + causal_mask(x.shape[-2]).astype(scores.dtype)
    top = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - top)
    attn = e / e.sum(axis=-1, keepdims=True)
    o = _merge_heads(attn @ v)
    y = x + o @ params["wo"]
    return y, (h, ln_cache, q, k, v, attn, o, scale, n_heads, params)


def attention_block_backward(dy: Tensor, cache):
    """Returns ``(dx, grads)`` with ``grads`` keyed like the params dict."""
    h, ln_cache, q, k, v, attn, o, scale, n_heads, params = cache
    d = h.shape[-1]

    def wgrad(a, b):
        return a.reshape(-1, d).T @ b.reshape(-1, d)

    g_wo = wgrad(o, dy)
    do = _split_heads(dy @ params["wo"].T, n_heads)
    dattn = do @ v.swapaxes(-1, -2)
    dv = attn.swapaxes(-1, -2) @ do
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = (dscores @ k) * scale
    dk = (dscores.swapaxes(-1, -2) @ q) * scale
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    grads = {"wq": wgrad(h, dq), "wk": wgrad(h, dk), "wv": wgrad(h, dv), "wo": g_wo}
    dh = dq @ params["wq"].T + dk @ params["wk"].T + dv @ params["wv"].T
    dx_ln, grads["ln_gain"], grads["ln_shift"] = layer_norm_backward(dh, ln_cache)
    return dy + dx_ln, grads

