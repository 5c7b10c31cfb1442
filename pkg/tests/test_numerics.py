import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import gradcheck
from movekit import numerics as nx
from movekit.errors import DimensionError, InvalidGateError, LabelIndexError, TrainingDivergence

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


# -- matmul -----------------------------------------------------------------


def test_matmul_identity_and_scalar():
    x = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nx.matmul(np.eye(3), x), x)
    assert nx.matmul(np.array([[2.0]]), np.array([[3.0]])).tolist() == [[6.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    np.testing.assert_allclose(nx.matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-12)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite),
       st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_matmul_bitwise_equal_to_fixed_order_loop(a, n, seed):
    b = np.random.default_rng(seed).uniform(-3, 3, size=(a.shape[1], n))
    assert np.array_equal(nx.matmul(a, b), triple_loop(a, b))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


# -- softmax / cross-entropy ------------------------------------------------


def test_softmax_basic_cases():
    np.testing.assert_allclose(nx.softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)
    out = nx.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0) and out[1] < 1e-300


def test_softmax_extended_precision_oracle():
    mpmath.mp.dps = 50
    z = [1, 2, 3]
    denom = sum(mpmath.exp(v) for v in z)
    oracle = [float(mpmath.exp(v) / denom) for v in z]
    np.testing.assert_allclose(nx.softmax(np.array(z, dtype=float)), oracle, rtol=0, atol=1e-15)


def test_softmax_masked_entries_are_exact_zero():
    out = nx.softmax(np.array([1.0, nx.MASK, 2.0]))
    assert out[1] == 0.0
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(InvalidGateError):
        nx.softmax(np.array([nx.MASK, nx.MASK]))


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=finite), st.randoms(use_true_random=False))
def test_softmax_sums_to_one_and_is_permutation_equivariant(v, r):
    out = nx.softmax(v)
    assert abs(out.sum() - 1.0) < 1e-9
    assert np.all(out > 0)
    perm = list(range(len(v)))
    r.shuffle(perm)
    np.testing.assert_array_equal(nx.softmax(v[perm]), out[perm])


def test_cross_entropy_known_values():
    loss, _ = nx.cross_entropy(np.zeros(3), 1)
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    assert round(loss, 6) == 1.098612
    loss, grad = nx.cross_entropy(np.array([0.0, 1e6, 0.0]), 1)
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)
    with pytest.raises(LabelIndexError):
        nx.cross_entropy(np.zeros(3), 3)


def test_cross_entropy_gradient_finite_differences(rng):
    for _ in range(20):
        z = rng.uniform(-1, 1, 5)
        label = int(rng.integers(5))
        _, grad = nx.cross_entropy(z, label)
        num = gradcheck.numeric_grad(lambda: nx.cross_entropy(z, label)[0], z, range(5))
        assert gradcheck.rel_error(grad, num) < 1e-6


def test_cross_entropy_mpmath_oracle(rng):
    mpmath.mp.dps = 40
    z = rng.uniform(-3, 3, 5)
    loss, _ = nx.cross_entropy(z, 2)
    oracle = -mpmath.log(mpmath.exp(z[2]) / sum(mpmath.exp(v) for v in z))
    assert loss == pytest.approx(float(oracle), abs=1e-13)


def test_cross_entropy_rows_matches_per_row_mean(rng):
    z = rng.standard_normal((6, 4))
    y = rng.integers(0, 4, 6)
    loss, grad = nx.cross_entropy_rows(z, y)
    singles = [nx.cross_entropy(z[i], y[i]) for i in range(6)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-12)
    np.testing.assert_allclose(grad, np.stack([s[1] for s in singles]) / 6, atol=1e-14)


# -- AdamW ------------------------------------------------------------------


def adamw_scalar_oracle(value, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        value = value * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        value = value - lr * m_hat / (math.sqrt(v_hat) + eps)
    return value


def test_adamw_scalar_recurrence_oracle():
    cfg = nx.OptimizerConfig(0.1, weight_decay=0.0)
    st_ = nx.ParamState(np.array([0.5]))
    st_.grad = np.array([1.0])
    nx.adamw_step(st_, cfg)
    assert st_.step == 1
    assert st_.value[0] == pytest.approx(adamw_scalar_oracle(0.5, [1.0], 0.1, 0.9, 0.999, 1e-8, 0.0), abs=1e-12)
    # frozen: one step with g=1 from 0.5 moves by lr/(1+eps)
    assert st_.value[0] == pytest.approx(0.4000000009999999, abs=1e-12)


def test_adamw_multi_step_with_decay_matches_oracle():
    grads = [0.3, -1.2, 0.7, 0.05]
    cfg = nx.OptimizerConfig(0.05, weight_decay=0.1)
    st_ = nx.ParamState(np.array([2.0]))
    for g in grads:
        st_.grad = np.array([g])
        nx.adamw_step(st_, cfg)
    assert st_.step == 4
    assert st_.value[0] == pytest.approx(adamw_scalar_oracle(2.0, grads, 0.05, 0.9, 0.999, 1e-8, 0.1), abs=1e-12)


def test_adamw_fixed_points():
    st_ = nx.ParamState(np.array([1.5, -2.0]))
    nx.adamw_step(st_, nx.OptimizerConfig(0.1, weight_decay=0.0))
    np.testing.assert_array_equal(st_.value, [1.5, -2.0])
    nx.adamw_step(st_, nx.OptimizerConfig(0.1, weight_decay=0.2))
    np.testing.assert_allclose(st_.value, np.array([1.5, -2.0]) * (1 - 0.1 * 0.2), rtol=0, atol=1e-15)


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=finite),
       hnp.arrays(np.float64, st.integers(1, 8), elements=finite))
def test_adamw_zero_lr_is_identity(value, grad):
    n = min(len(value), len(grad))
    st_ = nx.ParamState(value[:n].copy())
    st_.grad = grad[:n].copy()
    nx.adamw_step(st_, nx.OptimizerConfig(0.0, weight_decay=0.0))
    np.testing.assert_array_equal(st_.value, value[:n])
    assert st_.step == 1


def test_adamw_nonfinite_gradient_names_parameter():
    opt = nx.AdamW({"enc.w": np.zeros(2)}, nx.OptimizerConfig(0.1))
    with pytest.raises(TrainingDivergence) as info:
        opt.step({"enc.w": np.array([0.0, np.nan])})
    assert info.value.param == "enc.w"


def test_adamw_sparse_update_leaves_other_params():
    a, b = np.ones(3), np.ones(3)
    opt = nx.AdamW({"a": a, "b": b}, nx.OptimizerConfig(0.1))
    opt.step({"a": np.ones(3)})
    assert np.all(a < 1) and np.array_equal(b, np.ones(3))
    assert opt.states["b"].step == 0


def test_no_decay_rule():
    assert nx.no_decay("l1.b") and nx.no_decay("blocks.0.attn.ln_gain") and nx.no_decay("patch.b")
    assert not nx.no_decay("l1.w") and not nx.no_decay("tok_emb") and not nx.no_decay("router.w")


def test_optimizer_config_validation():
    for bad in (dict(beta1=1.0), dict(beta2=1.0), dict(epsilon=0.0), dict(weight_decay=-1.0)):
        with pytest.raises(ValueError):
            nx.OptimizerConfig(0.1, **bad)


def test_glorot_bounds(rng):
    w = nx.glorot(rng, 10, 6)
    assert np.abs(w).max() <= math.sqrt(6 / 16)


# -- layers -----------------------------------------------------------------


def test_linear_layer_trivial_cases(rng):
    x = rng.standard_normal((4, 3))
    y, _ = nx.linear_layer(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(y, x)
    b = rng.standard_normal(5)
    y, _ = nx.linear_layer(np.zeros((4, 3)), rng.standard_normal((3, 5)), b)
    np.testing.assert_array_equal(y, np.tile(b, (4, 1)))
    with pytest.raises(DimensionError):
        nx.linear_layer(x, np.zeros((4, 2)))


def test_linear_layer_gradients(rng):
    for _ in range(20):
        x, w, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2)), rng.uniform(-1, 1, 2)
        r = rng.standard_normal((3, 2))
        f = lambda: float((nx.linear_layer(x, w, b)[0] * r).sum())
        _, cache = nx.linear_layer(x, w, b)
        dx, dw, db = nx.linear_layer_backward(r, cache)
        assert gradcheck.check(f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}, rng) < 1e-6


def test_layer_norm_trivial_cases():
    g, s = np.ones(4), np.array([0.1, 0.2, 0.3, 0.4])
    y, _ = nx.layer_norm(np.full((2, 4), 7.0), g, s)
    np.testing.assert_allclose(y, np.tile(s, (2, 1)), atol=1e-12)
    y, _ = nx.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2))
    np.testing.assert_allclose(y, [[1 / math.sqrt(1 + 1e-5), -1 / math.sqrt(1 + 1e-5)]], atol=1e-15)
    with pytest.raises(DimensionError):
        nx.layer_norm(np.zeros((2, 1)), np.ones(1), np.zeros(1))


def test_layer_norm_gradients(rng):
    for _ in range(20):
        x = rng.uniform(-1, 1, (4, 8))
        g, s = rng.uniform(-1, 1, 8), rng.uniform(-1, 1, 8)
        r = rng.standard_normal((4, 8))
        f = lambda: float((nx.layer_norm(x, g, s)[0] * r).sum())
        dx, dg, ds = nx.layer_norm_backward(r, nx.layer_norm(x, g, s)[1])
        assert gradcheck.check(f, {"x": x, "g": g, "s": s}, {"x": dx, "g": dg, "s": ds}, rng) < 1e-5


def test_gelu_gradient(rng):
    for _ in range(20):
        x = rng.uniform(-3, 3, 7)
        r = rng.standard_normal(7)
        f = lambda: float((nx.gelu(x)[0] * r).sum())
        dx = nx.gelu_backward(r, nx.gelu(x)[1])
        assert gradcheck.check(f, {"x": x}, {"x": dx}, rng) < 1e-6


# -- attention --------------------------------------------------------------


def test_attention_single_token_is_value_path(rng):
    p = nx.init_attention(rng, 4)
    x = rng.standard_normal((1, 4))
    y, cache = nx.attention_block(x, p)
    attn = cache[5]
    assert attn.shape[-1] == 1 and np.all(attn == 1.0)
    h, _ = nx.layer_norm(x, p["ln_gain"], p["ln_shift"])
    np.testing.assert_allclose(y, x + h @ p["wv"] @ p["wo"], atol=1e-14)


def test_causal_attention_ignores_future(rng):
    p = nx.init_attention(rng, 4)
    x = rng.standard_normal((5, 4))
    y, _ = nx.attention_block(x, p, causal=True)
    for t in range(5):
        x2 = x.copy()
        x2[t:] += 10.0 * rng.standard_normal((5 - t, 4))
        y2, _ = nx.attention_block(x2, p, causal=True)
        np.testing.assert_array_equal(y2[:t], y[:t])
        if t < 5:
            assert not np.allclose(y2[t], y[t])


@pytest.mark.parametrize("causal,heads", [(False, 1), (True, 1), (True, 2)])
def test_attention_gradients(rng, causal, heads):
    for _ in range(20):
        x = rng.uniform(-1, 1, (2, 3, 4))
        p = nx.init_attention(rng, 4)
        p["ln_gain"] = rng.uniform(0.5, 1.5, 4)
        p["ln_shift"] = rng.uniform(-0.5, 0.5, 4)
        r = rng.standard_normal((2, 3, 4))
        f = lambda: float((nx.attention_block(x, p, causal=causal, n_heads=heads)[0] * r).sum())
        dx, grads = nx.attention_block_backward(r, nx.attention_block(x, p, causal=causal, n_heads=heads)[1])
        assert gradcheck.check(f, {"x": x, **p}, {"x": dx, **grads}, rng) < 1e-5


def test_attention_head_divisibility():
    with pytest.raises(DimensionError):
        nx.attention_block(np.zeros((2, 6)), nx.init_attention(np.random.default_rng(0), 6), n_heads=4)


def test_float_dtype_switch(monkeypatch):
    monkeypatch.delenv(nx.FP64_ENV, raising=False)
    assert nx.float_dtype() == np.float32
    monkeypatch.setenv(nx.FP64_ENV, "1")
    assert nx.float_dtype() == np.float64


def test_kernels_are_deterministic(rng):
    p = nx.init_attention(rng, 8)
    x = rng.standard_normal((3, 5, 8))
    a = nx.attention_block(x, p, causal=True, n_heads=2)[0]
    b = nx.attention_block(x.copy(), p, causal=True, n_heads=2)[0]
    assert a.tobytes() == b.tobytes()
