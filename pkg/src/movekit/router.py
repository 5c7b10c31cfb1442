"""Expert selection from mean-pooled general-encoder features.

The router is a single linear map ``logits = f_avg @ W (+ b)`` followed by a
hard argmax. :func:`gate` is the generic ``Softmax(TopK(x @ W_g))`` form;
with ``K = 1`` it is one-hot on the router's choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import StageConfig
from .errors import ConfigurationError, DimensionError, RoutingError, TrainingDivergence


@dataclass
class RouterParams:
    w: np.ndarray  # (D, N)
    b: np.ndarray | None = None  # (N,)

    @property
    def n_experts(self) -> int:
        return self.w.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        d = {"w": self.w}
        if self.b is not None:
            d["b"] = self.b
        return d

    def copy(self) -> "RouterParams":
        return RouterParams(self.w.copy(), None if self.b is None else self.b.copy())

    @classmethod
    def zeros(cls, d: int, n: int, bias: bool = False, dtype=np.float64) -> "RouterParams":
        return cls(np.zeros((d, n), dtype=dtype), np.zeros(n, dtype=dtype) if bias else None)


class OpCounter:
    """Counts encoder forwards and router products for cost assertions."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, key: str, n: int = 1) -> None:
        self.counts[key] = self.counts.get(key, 0) + n

    def __getitem__(self, key: str) -> int:
        return self.counts.get(key, 0)

    def reset(self) -> None:
        self.counts.clear()


def mean_pool(fmap: np.ndarray) -> np.ndarray:
    """Mean over the token axis: ``(..., T, D) -> (..., D)``."""
    fmap = np.asarray(fmap)
    if fmap.ndim < 2 or fmap.shape[-2] < 1:
        raise DimensionError(f"mean_pool: need at least one token, got shape {fmap.shape}")
    return fmap.mean(axis=-2)


def route_logits(f_avg: np.ndarray, params: RouterParams, counter: OpCounter | None = None) -> np.ndarray:
    f_avg = np.asarray(f_avg)
    if f_avg.shape[-1] != params.w.shape[0]:
        raise ConfigurationError(
            f"route_logits: pooled width {f_avg.shape[-1]} != router rows {params.w.shape[0]}"
        )
    if counter is not None:
        counter.add("router_matmul")
    logits = f_avg @ params.w
    if params.b is not None:
        logits = logits + params.b
    return logits


def select_expert(logits: np.ndarray) -> int:
    """Argmax with ties resolved to the lowest index."""
    z = np.asarray(logits)
    if z.ndim != 1 or z.size < 1:
        raise RoutingError(f"select_expert: expected a non-empty vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise RoutingError(f"select_expert: non-finite logits {z.tolist()}")
    return int(np.argmax(z))


def select_experts(logits: np.ndarray) -> np.ndarray:
    """Row-wise :func:`select_expert` for ``(B, N)`` logits."""
    z = np.asarray(logits)
    if not np.all(np.isfinite(z)):
        raise RoutingError("select_experts: non-finite logits")
    return np.argmax(z, axis=-1)


def topk_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries (ties to lower index), set the rest to -inf."""
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"gate: K={k} outside [1, {n}]")
    order = np.argsort(-logits, kind="stable")
    keep = np.zeros(n, dtype=bool)
    keep[order[:k]] = True
    return np.where(keep, logits, nx.MASK)


def gate(x: np.ndarray, params: RouterParams, k: int) -> np.ndarray:
    """``Softmax(TopK(x @ W_g))`` for one input vector."""
    logits = route_logits(x, params)
    if logits.ndim != 1:
        raise DimensionError(f"gate: expected a single input vector, got shape {np.shape(x)}")
    if not 1 <= k <= params.n_experts:
        raise ConfigurationError(f"gate: K={k} outside [1, {params.n_experts}]")
    return nx.softmax(topk_mask(logits, k))


def gate_backward(dweights: np.ndarray, x: np.ndarray, params: RouterParams, k: int):
    """Gradients of a scalar w.r.t. ``x`` and the router parameters.

    The top-K selection is treated as a fixed mask (piecewise-constant), so
    gradients flow only through the kept logits.
    """
    weights = gate(x, params, k)
    dlogits = weights * (dweights - np.dot(dweights, weights))
    dx = params.w @ dlogits
    grads = {"w": np.outer(x, dlogits)}
    if params.b is not None:
        grads["b"] = dlogits
    return dx, grads


@dataclass
class RouterTrainResult:
    params: RouterParams
    trace: list[dict] = field(default_factory=list)


def accuracy(params: RouterParams, features: np.ndarray, labels: np.ndarray) -> float:
    pred = select_experts(route_logits(features, params))
    return float(np.mean(pred == labels))


def train_router(
    features: np.ndarray,
    labels: np.ndarray,
    cfg: StageConfig,
    init: RouterParams,
    heldout: tuple[np.ndarray, np.ndarray] | None = None,
) -> RouterTrainResult:
    """Minimise cross-entropy of ``route_logits(features)`` against ``labels``.

    ``features`` are mean-pooled general-encoder features ``(N, D)``; the
    encoder itself is not touched. Returns new parameters plus a metrics
    trace with one record per ``cfg.eval_every`` steps (and the last step).
    """
    params = init.copy()
    n_classes = params.n_experts
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ConfigurationError("train_router: labels outside the expert range")
    rng = np.random.default_rng(cfg.seed)
    opt = nx.AdamW(params.as_dict(), cfg.optimizer())
    trace = []
    window = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(labels), size=cfg.batch_size)
        x, y = features[idx], labels[idx]
        logits = route_logits(x, params)
        loss, dlogits = nx.cross_entropy_rows(logits, y)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"router loss is non-finite at step {step}", step=step)
        grads = {"w": x.T @ dlogits}
        if params.b is not None:
            grads["b"] = dlogits.sum(axis=0)
        opt.step(grads)
        window.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            rec = {"stage": "router", "step": step, "loss": float(np.mean(window)), "lr": cfg.learning_rate}
            if heldout is not None:
                rec["accuracy"] = accuracy(params, *heldout)
            trace.append(rec)
            window = []
    return RouterTrainResult(params, trace)
