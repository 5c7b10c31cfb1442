import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcheck
from movekit import numerics as nx
from movekit import vision as vi
from movekit.adapters import AdapterParams, adapt, adapt_backward, build_adapters, init_adapter
from movekit.errors import ConfigurationError


def test_token_count_preserved_at_full_size(rng):
    a = init_adapter(0, 12, 16, 8, rng)
    y = adapt(a, rng.standard_normal((256, 12)))
    assert y.shape == (256, 8)


def test_zero_adapter_gives_zero_output():
    a = AdapterParams(0, {"l1.w": np.zeros((5, 4)), "l1.b": np.zeros(4), "l2.w": np.zeros((4, 6)), "l2.b": np.zeros(6)})
    y = adapt(a, np.ones((3, 5)))
    assert y.shape == (3, 6) and not y.any()


def test_width_mismatch(rng):
    with pytest.raises(ConfigurationError):
        adapt(init_adapter(0, 5, 4, 6, rng), np.zeros((3, 4)))


def test_adapter_gradients(rng):
    for _ in range(20):
        a = init_adapter(1, 5, 4, 3, rng)
        for k in a.params:
            a.params[k] = rng.uniform(-1, 1, a.params[k].shape)
        x = rng.uniform(-1, 1, (2, 6, 5))
        r = rng.standard_normal((2, 6, 3))
        f = lambda: float((adapt(a, x) * r).sum())
        dx, grads = adapt_backward(r, adapt(a, x, keep_cache=True)[1])
        assert gradcheck.check(f, {"x": x, **a.params}, {"x": dx, **grads}, rng) < 1e-5


def test_build_adapters_contract():
    specs = vi.desk_specs()
    ads = build_adapters(specs, 64, seed=0)
    assert [a.expert for a in ads] == [0, 1, 2]
    assert [a.in_width for a in ads] == [s.out_width for s in specs]
    assert all(a.out_width == 64 for a in ads)
    other = build_adapters(specs, 64, seed=1)
    assert not np.array_equal(ads[0].params["l1.w"], other[0].params["l1.w"])
    # no sharing between experts
    assert all(ads[0].params[k] is not ads[1].params[k] for k in ads[0].params)
    with pytest.raises(ConfigurationError):
        build_adapters([specs[0], specs[0]], 64)


@given(st.integers(0, 2), st.integers(0, 2**31 - 1))
def test_adapters_are_expert_disjoint_under_training_step(chosen, seed):
    rng = np.random.default_rng(seed)
    ads = build_adapters(vi.desk_specs(), 16, seed=seed % 7)
    before = [{k: v.copy() for k, v in a.params.items()} for a in ads]
    params = {f"{a.expert}.{k}": v for a in ads for k, v in a.params.items()}
    opt = nx.AdamW(params, nx.OptimizerConfig(1e-2))
    a = ads[chosen]
    y, cache = adapt(a, rng.standard_normal((4, a.in_width)), keep_cache=True)
    _, g = adapt_backward(rng.standard_normal(y.shape), cache)
    opt.step({f"{chosen}.{k}": v for k, v in g.items()})
    for e, ad in enumerate(ads):
        same = all(np.array_equal(ad.params[k], before[e][k]) for k in ad.params)
        assert same == (e != chosen)
