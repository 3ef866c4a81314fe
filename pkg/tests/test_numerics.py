import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptfed import numerics as nx
from promptfed.numerics import Tape, numeric_grad, rel_error


def fd(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    return numeric_grad(lambda: f(x), x, h)


# --- matmul ---------------------------------------------------------------


def test_matmul_identity_and_dot():
    np.testing.assert_array_equal(nx.matmul([[1, 0], [0, 1]], [[2, 3], [4, 5]]), [[2, 3], [4, 5]])
    np.testing.assert_array_equal(nx.matmul([[1, 2]], [[3], [4]]), [[11]])


def test_matmul_vjp_example():
    A = np.array([[1.0, 1.0]])
    B = np.array([[2.0], [5.0]])
    gA, _ = nx.matmul_vjp(A, B, np.ones((1, 1)))
    np.testing.assert_allclose(gA, [[2.0, 5.0]])
    num = fd(lambda a: nx.matmul(a, B).sum(), A)
    assert rel_error(gA, num) < 1e-6


def test_matmul_shape_error():
    with pytest.raises(nx.DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


# --- softmax --------------------------------------------------------------


def test_softmax_examples(backend):
    np.testing.assert_allclose(nx.softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])
    y = nx.softmax_rows([[1000.0, 0.0]])
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [[1.0, 0.0]], atol=1e-12)


def test_softmax_vjp(backend, rng):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))
    an = nx.softmax_rows_vjp(x, w)
    assert rel_error(an, fd(lambda v: (nx.softmax_rows(v) * w).sum(), x)) < 1e-6


# --- layer norm -----------------------------------------------------------


def test_layer_norm_examples(backend):
    np.testing.assert_allclose(nx.layer_norm([1.0, 1.0, 1.0], np.ones(3), np.zeros(3)), [0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(nx.layer_norm([-1.0, 1.0], np.ones(2), np.zeros(2), eps=0.0), [-1, 1])


def test_layer_norm_vjp(backend, rng):
    x = rng.normal(size=(4, 6))
    gam, bet = rng.normal(size=6), rng.normal(size=6)
    w = rng.normal(size=(4, 6))
    gx, gg, gb = nx.layer_norm_vjp(x, gam, bet, w)
    assert rel_error(gx, fd(lambda v: (nx.layer_norm(v, gam, bet) * w).sum(), x)) < 1e-5
    assert rel_error(gg, fd(lambda v: (nx.layer_norm(x, v, bet) * w).sum(), gam)) < 1e-5
    assert rel_error(gb, fd(lambda v: (nx.layer_norm(x, gam, v) * w).sum(), bet)) < 1e-5


# --- gelu -----------------------------------------------------------------


def test_gelu_examples(backend):
    assert nx.gelu(np.array([0.0]))[0] == 0.0
    assert abs(nx.gelu(np.array([10.0]))[0] - 10.0) < 1e-6


def test_gelu_vjp(backend, rng):
    x = rng.normal(scale=2.0, size=(3, 4))
    w = rng.normal(size=(3, 4))
    assert rel_error(nx.gelu_vjp(x, w), fd(lambda v: (nx.gelu(v) * w).sum(), x)) < 1e-5


# --- cross entropy --------------------------------------------------------


def test_cross_entropy_examples():
    assert nx.cross_entropy([0.0, 0.0], 0) == pytest.approx(np.log(2.0), abs=1e-12)
    assert nx.cross_entropy([10.0, -10.0], 0) < 1e-8


def test_cross_entropy_grad(rng):
    z = rng.normal(size=5)
    assert rel_error(nx.cross_entropy_grad(z, 3), fd(lambda v: nx.cross_entropy(v, 3), z)) < 1e-6


def test_cross_entropy_bad_label():
    with pytest.raises(IndexError):
        nx.cross_entropy([0.0, 1.0], 2)


# --- cosine ---------------------------------------------------------------


def test_cosine_examples():
    assert nx.cosine_similarity([1, 0], [1, 0]) == pytest.approx(1.0)
    assert nx.cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)
    assert nx.cosine_similarity([1, 1], [1, 0]) == pytest.approx(np.sqrt(0.5), abs=1e-12)


def test_cosine_grad_b():
    a, b = np.array([1.0, 1.0]), np.array([1.0, 0.0])
    _, gb = nx.cosine_similarity_vjp(a, b)
    assert rel_error(gb, fd(lambda v: nx.cosine_similarity(a, v), b)) < 1e-6


def test_cosine_zero_vector():
    with pytest.raises(nx.DegenerateInputError):
        nx.cosine_similarity([0.0, 0.0], [1.0, 0.0])


# --- randomized VJP sweep ---------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_kernel_vjps_random_seeds(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 3))
    w = r.normal(size=(2, 3))
    gam, bet = r.normal(size=3), r.normal(size=3)
    checks = [
        (nx.softmax_rows_vjp(x, w), fd(lambda v: (nx.softmax_rows(v) * w).sum(), x)),
        (nx.gelu_vjp(x, w), fd(lambda v: (nx.gelu(v) * w).sum(), x)),
        (nx.layer_norm_vjp(x, gam, bet, w)[0], fd(lambda v: (nx.layer_norm(v, gam, bet) * w).sum(), x)),
        (nx.cosine_similarity_vjp(x[0], x[1])[0], fd(lambda v: nx.cosine_similarity(v, x[1]), x[0])),
    ]
    for an, num in checks:
        assert rel_error(an, num) < 1e-4


# --- tape -----------------------------------------------------------------


def _tape_loss(values, build):
    t = Tape()
    leaves = [t.leaf(v, trainable=True) for v in values]
    out = build(t, *leaves)
    t.backward(out)
    return float(out.value), [lf.grad for lf in leaves]


@pytest.mark.parametrize("op", ["matmul_gelu", "layer_norm", "attention", "concat_slice", "gather_mean", "ce"])
def test_tape_ops_match_fd(op, rng, backend):
    if op == "matmul_gelu":
        vals = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
        build = lambda t, a, b: t.mean(t.gelu(t.matmul(a, b)))
    elif op == "layer_norm":
        vals = [rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)]
        w = rng.normal(size=(3, 5))
        build = lambda t, x, g, b: t.mean(t.mul(t.layer_norm(x, g, b), t.const(w)))
    elif op == "attention":
        vals = [rng.normal(size=(2, 3, 4)) for _ in range(3)]
        w = rng.normal(size=(2, 3, 4))
        build = lambda t, q, k, v: t.mean(t.mul(t.attention(q, k, v), t.const(w)))
    elif op == "concat_slice":
        vals = [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))]
        build = lambda t, a, b: t.mean(t.gelu(t.slice(t.concat([a, b], axis=1), (slice(None), slice(1, 4)))))
    elif op == "gather_mean":
        vals = [rng.normal(size=(3, 4)), rng.normal(size=(5, 4))]
        idx = np.array([0, 2, 2, 1, 0])
        build = lambda t, a, f: t.mean(t.cosine(f, t.gather(a, idx)))
    else:
        vals = [rng.normal(size=(4, 3))]
        y = np.array([0, 2, 1, 1])
        build = lambda t, z: t.cross_entropy(z, y)
    _, grads = _tape_loss(vals, build)
    for i, v in enumerate(vals):
        def f(x, i=i):
            vs = list(vals)
            vs[i] = x
            return _tape_loss(vs, build)[0]

        assert rel_error(grads[i], fd(f, v)) < 1e-6, f"leaf {i}"


def test_frozen_leaves_get_no_gradient(rng):
    t = Tape()
    a = t.leaf(rng.normal(size=(2, 3)), trainable=True)
    w = t.leaf(rng.normal(size=(3, 3)))
    t.backward(t.mean(t.matmul(a, w)))
    assert a.grad is not None
    assert w.grad is None
    assert t.frozen_leaves() == [w]


def test_unreachable_trainable_leaf_gets_zero_grad(rng):
    t = Tape()
    a = t.leaf(rng.normal(size=3), trainable=True)
    b = t.leaf(rng.normal(size=3), trainable=True)
    t.backward(t.mean(a))
    np.testing.assert_array_equal(b.grad, np.zeros(3))


def test_determinism(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(nx.gelu(x), nx.gelu(x.copy()))
    assert np.array_equal(nx.softmax_rows(x), nx.softmax_rows(x.copy()))


def test_backends_agree(rng):
    from promptfed import _backend

    if "cython" not in _backend.available():
        pytest.skip("compiled kernels not built")
    c, p = _backend.get("cython"), _backend.get("numpy")
    x = rng.normal(size=(6, 5))
    g = rng.normal(size=(6, 5))
    gam, bet = rng.normal(size=5), rng.normal(size=5)
    for a, b in zip(c.layer_norm_fwd(x, gam, bet, 1e-5), p.layer_norm_fwd(x, gam, bet, 1e-5)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(c.gelu_fwd(x), p.gelu_fwd(x), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(c.gelu_bwd(x, g), p.gelu_bwd(x, g), rtol=1e-12, atol=1e-14)
    y = p.softmax_fwd(x)
    np.testing.assert_allclose(c.softmax_fwd(x), y, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(c.softmax_bwd(y, g), p.softmax_bwd(y, g), rtol=1e-10, atol=1e-14)
