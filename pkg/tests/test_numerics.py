import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tlvcore import numerics as nx
from tlvcore.errors import (
    ConfigurationError,
    DegenerateInputError,
    DomainError,
    OracleInvalidError,
    ShapeError,
)
from tlvcore.numerics import Parameter

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_temp([0.0, 0.0], 1.0).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(nx.softmax_temp([math.log(2), 0.0], 1.0).data, [2 / 3, 1 / 3], atol=1e-15)
    p = nx.softmax_temp([1.0, 0.9], 0.05).data
    assert p[0] == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-15)
    assert p[0] == pytest.approx(0.880797, abs=1e-6)


def test_softmax_errors():
    with pytest.raises(ConfigurationError):
        nx.softmax_temp([1.0], 0.0)
    with pytest.raises(ConfigurationError):
        nx.softmax_temp([1.0], -1.0)
    with pytest.raises(DomainError):
        nx.softmax_temp(np.zeros(0), 1.0)
    with pytest.raises(DomainError):
        nx.softmax_temp([np.nan, 1.0], 1.0)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 12), elements=finite), finite,
       st.floats(0.01, 5.0))
def test_softmax_simplex_and_shift(x, c, tau):
    p = nx.softmax_temp(x, tau).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(nx.softmax_temp(x + c, tau).data, p, atol=1e-12)
    lp = nx.log_softmax_temp(x, tau).data
    np.testing.assert_allclose(np.exp(lp), p, atol=1e-12)


def test_l2_normalize_examples():
    np.testing.assert_allclose(nx.l2_normalize([3.0, 4.0]).data, [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(nx.l2_normalize([1.0, 0.0, 0.0]).data, [1.0, 0.0, 0.0])
    v = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(nx.l2_normalize(7.5 * v).data, nx.l2_normalize(v).data, atol=1e-15)
    with pytest.raises(DegenerateInputError):
        nx.l2_normalize([0.0, 0.0])
    with pytest.raises(DegenerateInputError):
        nx.l2_normalize([1e-14, 0.0])


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 10), elements=finite))
def test_l2_normalize_unit_and_idempotent(v):
    if np.linalg.norm(v) <= 1e-6:
        return
    u = nx.l2_normalize(v).data
    assert abs(np.linalg.norm(u) - 1.0) < 1e-12
    np.testing.assert_allclose(nx.l2_normalize(u).data, u, atol=1e-12)


def test_cosine_examples():
    assert nx.cosine_similarity([1.0, 0.0], [0.0, 1.0]).data == pytest.approx(0.0, abs=1e-15)
    v = np.array([0.5, -2.0, 1.0])
    assert float(nx.cosine_similarity(v, v).data) == pytest.approx(1.0, abs=1e-15)
    assert float(nx.cosine_similarity(v, -v).data) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ShapeError):
        nx.cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateInputError):
        nx.cosine_similarity([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, 5, elements=finite), hnp.arrays(np.float64, 5, elements=finite),
       st.floats(0.1, 10.0))
def test_cosine_symmetric_and_scale_invariant(a, b, c):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    ab = float(nx.cosine_similarity(a, b).data)
    assert -1 - 1e-12 <= ab <= 1 + 1e-12
    assert float(nx.cosine_similarity(b, a).data) == pytest.approx(ab, abs=1e-12)
    assert float(nx.cosine_similarity(c * a, b).data) == pytest.approx(ab, abs=1e-12)


def test_finite_diff_quadratic_and_constant():
    theta = Parameter("theta", np.array([3.0]))
    err = nx.finite_diff_check(lambda p: nx.sum_(nx.mul(p, p)), theta)
    assert err < 1e-8
    assert nx.finite_diff_check(lambda p: nx.Tensor(0.0), theta) == 0.0


def test_finite_diff_rejects_bad_eps_and_nondeterminism():
    theta = Parameter("theta", np.array([1.0]))
    with pytest.raises(ConfigurationError):
        nx.finite_diff_check(lambda p: nx.sum_(p), theta, eps=0.0)
    with pytest.raises(ConfigurationError):
        nx.finite_diff_check(lambda p: nx.sum_(p), theta, eps=1e-2)
    calls = iter(range(100))
    with pytest.raises(OracleInvalidError):
        nx.finite_diff_check(lambda p: nx.add(nx.sum_(p), float(next(calls))), theta)


def _fd(fn, params, seed=0):
    return nx.finite_diff_check(lambda _: fn(), params, seed=seed, max_coords_per_param=None)


@pytest.mark.parametrize("seed", range(10))
def test_ops_pass_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, t, d = 2, 3, 8
    x = Parameter("x", rng.normal(size=(n, t, d)))
    w = Parameter("w", rng.normal(size=(6, d)) * 0.3)
    b = Parameter("b", rng.normal(size=6) * 0.1)
    g = Parameter("g", 1 + 0.1 * rng.normal(size=d))
    beta = Parameter("beta", 0.1 * rng.normal(size=d))
    qkv_w = Parameter("qkv_w", rng.normal(size=(3 * d, d)) * 0.3)
    tok = Parameter("tok", rng.normal(size=d))
    params = [x, w, b, g, beta, qkv_w, tok]
    probe = rng.normal(size=(n, t + 1, 6))

    def f():
        h = nx.layer_norm(x, g, beta)
        h = nx.self_attention(nx.linear(h, qkv_w), 2)
        h = nx.prepend_token(nx.gelu(h), tok)
        out = nx.linear(h, w, b)
        return nx.sum_(nx.mul(out, probe))

    assert _fd(f, params) < 1e-4

    y = Parameter("y", rng.normal(size=(4, 5)))
    z = Parameter("z", rng.normal(size=(4, 5)))
    weights = rng.normal(size=(4, 4))

    def g2():
        c = nx.cosine_matrix(y, z)
        s = nx.log_softmax_temp(c, 0.5)
        e = nx.mean(nx.exp(nx.mul(nx.l2_normalize(y), 0.5)))
        r = nx.sum_(nx.mul(nx.softmax_temp(nx.matmul(y, nx.transpose(z)), 2.0), weights))
        picked = nx.sum_(nx.pick(s, np.array([0, 2, 1, 3])))
        return nx.add(nx.add(picked, e), nx.add(r, nx.sum_(nx.log(nx.add(nx.mul(y, y), 1.0)))))

    assert _fd(g2, [y, z]) < 1e-4

    table = Parameter("table", rng.normal(size=(7, 3)))
    ids = rng.integers(0, 7, size=(2, 4))

    def h():
        e = nx.embedding(ids, table)
        part = nx.getitem(e, (slice(None), slice(1, 3), slice(None)))
        cat = nx.concat([part, nx.reshape(e, (2, 4, 3))], axis=1)
        return nx.sum_(nx.mul(cat, cat), axis=None)

    assert _fd(h, [table]) < 1e-4


def test_parameter_zero_grad_and_copy():
    v = np.ones(3)
    p = Parameter("p", v)
    v[0] = 5.0
    assert p.data[0] == 1.0
    p.grad += 2.0
    p.zero_grad()
    assert np.all(p.grad == 0.0) and p.grad.shape == p.data.shape


def test_no_grad_blocks_tape():
    p = Parameter("p", np.ones(2))
    with nx.no_grad():
        y = nx.mul(p, 2.0)
    assert not y.requires_grad


def test_backward_accumulates_through_shared_use():
    p = Parameter("p", np.array([2.0]))
    nx.sum_(nx.add(nx.mul(p, p), nx.mul(p, 3.0))).backward()
    assert p.grad[0] == pytest.approx(7.0)


def test_global_grad_norm():
    a, b = Parameter("a", np.zeros(2)), Parameter("b", np.zeros(1))
    a.grad[:] = [3.0, 0.0]
    b.grad[:] = [4.0]
    assert nx.global_grad_norm([a, b]) == pytest.approx(5.0)
