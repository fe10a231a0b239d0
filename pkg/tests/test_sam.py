import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tlvcore import numerics as nx
from tlvcore.errors import ConfigurationError, DomainError, ShapeError
from tlvcore.numerics import Parameter
from tlvcore.sam import (
    SamParams,
    decoupling_loss,
    grad_reverse,
    inference_sensor,
    init_sam_params,
    modulate,
    route,
    sensor_posterior,
)


def sam_from(w_r, centroids, tau=0.05, lam=1.0):
    return SamParams(Parameter("sam.W_r", np.asarray(w_r, float)),
                     Parameter("sam.centroids", np.asarray(centroids, float)), tau, lam)


def test_route_examples():
    h = np.array([0.6, 0.8])
    np.testing.assert_allclose(route(h, sam_from(np.zeros((3, 2)), np.eye(3, 2) + 0.1)).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_array_equal(route(h, sam_from(np.ones((1, 2)), np.ones((1, 2)))).data, [1.0])
    w = np.stack([h / (h @ h), np.zeros(2)])
    e = math.e
    np.testing.assert_allclose(route(h, sam_from(w, np.eye(2))).data, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    with pytest.raises(ShapeError):
        route(np.ones(3), sam_from(np.zeros((2, 2)), np.eye(2)))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-5, 5)), hnp.arrays(np.float64, 5, elements=st.floats(-5, 5)))
def test_route_is_simplex(w, h):
    r = route(h, sam_from(w, np.ones((3, 5)))).data
    assert abs(r.sum() - 1) < 1e-12 and np.all(r >= 0)


def test_modulate_examples():
    np.testing.assert_allclose(modulate(np.array([1.0, 2.0]), np.array([0.5, 0.5]), 0).data, [1.5, 3.0])
    np.testing.assert_array_equal(modulate(np.array([1.0, 2.0]), np.array([0.0, 1.0]), 0).data, [1.0, 2.0])
    out = modulate(np.array([3.0, 4.0]), np.array([0.25, 0.75]), 0).data
    assert np.linalg.norm(out) == pytest.approx(6.25, abs=1e-12)
    with pytest.raises(DomainError):
        modulate(np.ones(2), np.array([0.5, 0.5]), 2)


def test_inference_sensor_ties_lowest():
    assert inference_sensor(np.array([0.4, 0.4, 0.2])) == 0
    np.testing.assert_array_equal(inference_sensor(np.array([[0.1, 0.9], [0.5, 0.5]])), [1, 0])


def test_posterior_examples():
    c = np.eye(3)
    p = sensor_posterior(np.ones(3), sam_from(np.zeros((3, 3)), c)).data
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)
    p2 = sensor_posterior(np.array([1.0, 0.0]), sam_from(np.zeros((2, 2)), np.eye(2))).data
    assert p2[0] == pytest.approx(1 / (1 + math.exp(-20)), abs=1e-15)
    assert 1 - p2[0] == pytest.approx(2.06e-9, rel=1e-2)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, 4, elements=st.floats(-3, 3)), st.floats(0.01, 100))
def test_posterior_scale_invariant(h, c):
    if np.linalg.norm(h) < 1e-3:
        return
    sam = sam_from(np.zeros((3, 4)), np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_allclose(sensor_posterior(c * h, sam).data, sensor_posterior(h, sam).data, atol=1e-10)


def test_decoupling_examples():
    sam = sam_from(np.zeros((4, 4)), np.eye(4))
    h = np.ones((5, 4))
    assert float(decoupling_loss(h, [0, 1, 2, 3, 0], sam).data) == pytest.approx(math.log(4), abs=1e-12)
    perfect = sam_from(np.zeros((2, 2)), np.eye(2), tau=1e-4)
    assert float(decoupling_loss(np.array([[1.0, 0.0]]), [0], perfect).data) == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(DomainError):
        decoupling_loss(np.zeros((0, 4)), [], sam)
    with pytest.raises(DomainError):
        decoupling_loss(h[:1], [4], sam)


def _naive_dl(h, s, c, tau):
    total = 0.0
    for hi, si in zip(h, s):
        cos = [float(hi @ cj / (np.linalg.norm(hi) * np.linalg.norm(cj))) / tau for cj in c]
        m = max(cos)
        lse = m + math.log(sum(math.exp(x - m) for x in cos))
        total += lse - cos[si]
    return total / len(s)


def test_decoupling_matches_naive_loop():
    rng = np.random.default_rng(3)
    h, c, s = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), np.array([0, 1, 1])
    got = float(decoupling_loss(h, s, sam_from(np.zeros((2, 4)), c)).data)
    assert got == pytest.approx(_naive_dl(h, s, c, 0.05), abs=1e-10)


def test_grad_reverse_examples():
    x = np.array([1.0, -2.0])
    assert grad_reverse(x, 1.0).data is not None
    np.testing.assert_array_equal(grad_reverse(x, 1.0).data, x)
    for lam, want in ((1.0, -6.0), (0.5, -3.0)):
        p = Parameter("x", np.array([3.0]))
        y = grad_reverse(p, lam)
        nx.sum_(nx.mul(y, y)).backward()
        assert p.grad[0] == pytest.approx(want)
    with pytest.raises(ConfigurationError):
        grad_reverse(x, 0.0)


def test_reversal_relation_against_finite_differences():
    rng = np.random.default_rng(5)
    h = Parameter("h", rng.normal(size=(3, 4)))
    sam = sam_from(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), lam=0.5)
    s = np.array([0, 1, 0])
    err = nx.finite_diff_check(lambda _: decoupling_loss(h, s, sam), [h, sam.centroids],
                               max_coords_per_param=None)
    assert err < 1e-4
    decoupling_loss(h, s, sam).backward()
    g_plain, c_plain = h.grad.copy(), sam.centroids.grad.copy()
    h.zero_grad(), sam.centroids.zero_grad()
    decoupling_loss(grad_reverse(h, 0.5), s, sam).backward()
    np.testing.assert_allclose(h.grad, -0.5 * g_plain, atol=1e-10)
    np.testing.assert_allclose(sam.centroids.grad, c_plain, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_sam_paths_finite_differences(seed):
    rng = np.random.default_rng(seed)
    h = Parameter("h", rng.normal(size=(3, 6)))
    sam = sam_from(rng.normal(size=(3, 6)), rng.normal(size=(3, 6)))
    s = rng.integers(0, 3, size=3)
    w = rng.normal(size=(3, 6))

    def f(_):
        r = route(h, sam)
        return nx.add(nx.sum_(nx.mul(modulate(h, r, s), w)), decoupling_loss(h, s, sam))

    assert nx.finite_diff_check(f, [h, sam.W_r, sam.centroids], max_coords_per_param=None) < 1e-4


def test_init_sam_params():
    p = init_sam_params(4, 8, 0)
    assert p["sam.W_r"].shape == (4, 8)
    np.testing.assert_allclose(np.linalg.norm(p["sam.centroids"].data, axis=1), 1.0, atol=1e-12)
