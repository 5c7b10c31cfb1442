"""Per-expert two-layer MLP adapters into the decoder embedding width."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DimensionError
from .vision import EncoderSpec


@dataclass
class AdapterParams:
    expert: int
    params: dict[str, np.ndarray]  # l1.w (D_i, H), l1.b, l2.w (H, D_LLM), l2.b

    @property
    def in_width(self) -> int:
        return self.params["l1.w"].shape[0]

    @property
    def out_width(self) -> int:
        return self.params["l2.w"].shape[1]


def init_adapter(expert: int, d_in: int, hidden: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float64) -> AdapterParams:
    return AdapterParams(expert, {
        "l1.w": nx.glorot(rng, d_in, hidden, dtype=dtype),
        "l1.b": np.zeros(hidden, dtype=dtype),
        "l2.w": nx.glorot(rng, hidden, d_out, dtype=dtype),
        "l2.b": np.zeros(d_out, dtype=dtype),
    })


def build_adapters(specs: list[EncoderSpec], d_llm: int, hidden: int | None = None, seed: int = 0,
                   dtype=np.float64) -> list[AdapterParams]:
    """One independently initialised adapter per expert, ordered by expert id."""
    ids = [s.expert for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"build_adapters: duplicate expert ids {ids}")
    hidden = d_llm if hidden is None else hidden
    out = []
    for spec in sorted(specs, key=lambda s: s.expert):
        rng = np.random.default_rng([seed, spec.expert])
        out.append(init_adapter(spec.expert, spec.out_width, hidden, d_llm, rng, dtype=dtype))
    return out


def adapt(adapter: AdapterParams, fmap: np.ndarray, keep_cache: bool = False):
    """Row-wise MLP over ``(..., T, D_i)``; the token count is unchanged.

    Returns the adapted features, plus a backward cache when ``keep_cache``.
    """
    fmap = np.asarray(fmap)
    if fmap.shape[-1] != adapter.in_width:
        raise ConfigurationError(
            f"adapter {adapter.expert}: input width {fmap.shape[-1]} != expected {adapter.in_width}"
        )
    p = adapter.params
    a, c1 = nx.linear_layer(fmap, p["l1.w"], p["l1.b"])
    g, cg = nx.gelu(a)
    y, c2 = nx.linear_layer(g, p["l2.w"], p["l2.b"])
    return (y, (c1, cg, c2)) if keep_cache else y


def adapt_backward(dy: np.ndarray, cache):
    """Returns ``(d_input, grads)``."""
    c1, cg, c2 = cache
    if dy.shape[-1] != c2[1].shape[1]:
        raise DimensionError(f"adapt_backward: gradient width {dy.shape[-1]} mismatch")
    dg, gw2, gb2 = nx.linear_layer_backward(dy, c2)
    da = nx.gelu_backward(dg, cg)
    dx, gw1, gb1 = nx.linear_layer_backward(da, c1)
    return dx, {"l1.w": gw1, "l1.b": gb1, "l2.w": gw2, "l2.b": gb2}
