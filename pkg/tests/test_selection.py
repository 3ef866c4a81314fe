import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptfed import selection as sel
from promptfed.numerics import DegenerateInputError, numeric_grad, rel_error


def test_select_examples():
    assert sel.select([1.0, 0.0], [[1, 0], [0, 1]]) == 0
    assert sel.select([0.3, -2.0], [[1.0, 1.0]]) == 0
    c = sel.cosine_matrix([[1.0, 1.0]], [[1, 0], [0.6, 0.8]])[0]
    np.testing.assert_allclose(c, [0.70710678, 0.98994949], atol=1e-8)
    assert sel.select([1.0, 1.0], [[1, 0], [0.6, 0.8]]) == 1


def test_select_tie_goes_to_lowest_index():
    assert sel.select([1.0, 0.0], [[0, 1], [0, 1], [0, 1]]) == 0
    assert sel.select_calibrated([1.0, 0.0], [[1, 1], [1, 1]], [0.5, 0.5]) == 0


def _keys_for_cos(cos):
    # unit keys in 2-D whose cosine with [1, 0] are exactly ``cos``
    cos = np.asarray(cos)
    return np.stack([cos, np.sqrt(1 - cos**2)], axis=1)


def test_calibrated_examples():
    keys = _keys_for_cos([0.9, 0.8])
    s = sel.calibrated_scores(np.array([0.9, 0.8]), [0.5, 0.5])
    np.testing.assert_allclose(s, [-0.05, -0.10])
    assert sel.select_calibrated([1.0, 0.0], keys, [0.5, 0.5]) == 0
    np.testing.assert_allclose(sel.calibrated_scores(np.array([0.9, 0.8]), [0.9, 0.1]), [-0.09, -0.02])
    assert sel.select_calibrated([1.0, 0.0], keys, [0.9, 0.1]) == 1


def test_unused_group_wins():
    keys = _keys_for_cos([0.99, 0.1])
    assert sel.select_calibrated([1.0, 0.0], keys, [1.0, 0.0]) == 1


def test_key_loss_examples():
    loss, grad, g = sel.key_loss([2.0, 0.0], [[3.0, 0.0], [0.0, 1.0]], [0.5, 0.5])
    assert g == 0 and loss == pytest.approx(-1.0)
    assert abs(grad @ np.array([1.0, 0.0])) < 1e-12
    loss, _, g = sel.key_loss([0.0, 1.0], [[1.0, 0.0]], [1.0])
    assert g == 0 and loss == pytest.approx(0.0)


def test_key_loss_grad_fd():
    rng = np.random.default_rng(0)
    f = rng.normal(size=5)
    keys = rng.normal(size=(3, 5))
    q = np.array([0.2, 0.3, 0.5])
    _, grad, g = sel.key_loss(f, keys, q)
    k = keys[g].copy()
    num = numeric_grad(lambda: sel.key_loss_grad(f[None], k[None])[0][0], k)
    assert rel_error(grad, num) < 1e-6


def test_update_q_examples():
    np.testing.assert_allclose(sel.update_q([3, 1]), [0.75, 0.25])
    np.testing.assert_allclose(sel.update_q([0, 0]), [0.5, 0.5])
    np.testing.assert_allclose(sel.update_q([5]), [1.0])
    with pytest.raises(ValueError):
        sel.update_q([-1, 2])


def test_momentum_examples():
    assert sel.momentum_merge(np.array(1.0), np.array(0.0), 0.5) == 0.5
    s, f = np.array([1.0, 2.0]), np.array([5.0, 7.0])
    np.testing.assert_array_equal(sel.momentum_merge(s, f, 0.0), f)
    np.testing.assert_array_equal(sel.momentum_merge(s, f, 1.0), s)
    with pytest.raises(ValueError):
        sel.momentum_merge(s, f, 1.5)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.0, 1.0), c=st.floats(-5.0, 5.0))
def test_momentum_is_affine(seed, alpha, c):
    r = np.random.default_rng(seed)
    s, f = r.normal(size=4), r.normal(size=4)
    np.testing.assert_allclose(sel.momentum_merge(s * c, f * c, alpha), c * sel.momentum_merge(s, f, alpha),
                               atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_routing_scale_invariance(seed):
    r = np.random.default_rng(seed)
    F = r.normal(size=(6, 4))
    K = r.normal(size=(3, 4))
    q = sel.update_q(r.integers(0, 5, size=3))
    a = r.uniform(0.01, 100.0, size=(6, 1))
    b = r.uniform(0.01, 100.0, size=(3, 1))
    # keep away from exact ties, where rounding could flip the argmax
    c = sel.cosine_matrix(F, K)
    for scores in (c, sel.calibrated_scores(c, q)):
        top = np.sort(scores, axis=1)
        if np.any(top[:, -1] - top[:, -2] < 1e-9):
            return
    np.testing.assert_array_equal(sel.select_batch(F * a, K * b), sel.select_batch(F, K))
    np.testing.assert_array_equal(sel.select_calibrated_batch(F * a, K * b, q), sel.select_calibrated_batch(F, K, q))


def test_zero_norm_rejected():
    with pytest.raises(DegenerateInputError):
        sel.select([0.0, 0.0], [[1.0, 0.0]])


def test_keybank():
    kb = sel.KeyBank.init(4, 8, seed=0)
    np.testing.assert_allclose(np.linalg.norm(kb.keys, axis=1), 1.0)
    np.testing.assert_allclose(kb.q, 0.25)
    c = kb.copy()
    c.keys[0] = 0.0
    assert kb.keys[0].any()
