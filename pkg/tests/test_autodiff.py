import numpy as np
import pytest
from conftest import central_diff, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from gradinv import autodiff as ad
from gradinv import kernels


def _scalar_fn(build, shapes):
    """Compile ``build(*vars) -> scalar node``; return value and gradient evaluators."""
    g = ad.Graph()
    xs = [g.variable(s) for s in shapes]
    out = build(*xs)
    grads = ad.gradient(out, xs)

    def value(*vals):
        return float(g.eval(dict(zip(xs, vals)), [out])[0])

    def grad(*vals):
        return g.eval(dict(zip(xs, vals)), grads)

    return value, grad


def _check_fd(build, shapes, rng, tol=1e-5, trials=20):
    value, grad = _scalar_fn(build, shapes)
    for _ in range(trials):
        vals = [rng.standard_normal(s) for s in shapes]
        an = grad(*vals)
        for k in range(len(vals)):

            def f(v, k=k):
                args = list(vals)
                args[k] = v
                return value(*args)

            num = central_diff(f, vals[k], eps=1e-4)
            assert rel_err(an[k], num) < tol


OPS = {
    "add": (lambda a, b: ad.mul(ad.add(a, b), ad.add(a, b)).sum(), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: ad.square(ad.sub(a, b)).sum(), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b).sum(), [(2, 5), (2, 5)]),
    "scale_shift": (lambda a: ad.square(ad.shift(ad.scale(a, -1.5), 0.3)).sum(), [(4,)]),
    "sigmoid": (lambda a: ad.sigmoid(a).sum(), [(3, 3)]),
    "matmul": (lambda a, b: (a @ b).sum(), [(4, 3), (3, 2)]),
    "transpose": (lambda a: ad.mul(a.T, a.T).sum(), [(2, 3)]),
    "reshape": (lambda a: ad.square(ad.reshape(a, (3, 4))).sum(), [(2, 6)]),
    "sum_rows": (lambda a: ad.square(ad.sum_rows(a)).sum(), [(3, 4)]),
    "sum_cols": (lambda a: ad.square(ad.sum_cols(a)).sum(), [(3, 4)]),
    "tile_rows": (lambda a: ad.square(ad.tile_rows(a, 3)).sum(), [(4,)]),
    "tile_cols": (lambda a: ad.square(ad.tile_cols(a, 3)).sum(), [(4,)]),
    "add_bias_2d": (lambda a, b: ad.square(ad.add_bias(a, b)).sum(), [(3, 4), (4,)]),
    "add_bias_4d": (lambda a, b: ad.square(ad.add_bias(a, b)).sum(), [(2, 3, 2, 2), (3,)]),
    "softmax": (lambda a: ad.mul(ad.softmax(a), ad.softmax(a)).sum(), [(2, 5)]),
    "logsumexp": (lambda a: ad.logsumexp(a).sum(), [(3, 4)]),
    "cross_entropy": (lambda a, t: ad.softmax_cross_entropy(a, t), [(3, 4), (3, 4)]),
    "conv2d": (lambda x, k, r: ad.square(ad.conv2d(x, k, r, stride=2, padding=1)).sum(), [(1, 3, 8, 8), (2, 3, 3, 3), (2,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_finite_differences(name, rng):
    build, shapes = OPS[name]
    _check_fd(build, shapes, rng)


@pytest.mark.parametrize("name", ["sigmoid", "softmax", "cross_entropy", "conv2d", "matmul"])
def test_second_order_matches_finite_differences(name, rng):
    # d/dx of the squared gradient norm exercises every VJP rule twice
    build, shapes = OPS[name]

    def grad_norm(*xs):
        gs = ad.gradient(build(*xs), xs)
        total = ad.square(gs[0]).sum()
        for gk in gs[1:]:
            total = total + ad.square(gk).sum()
        return total

    _check_fd(grad_norm, shapes, rng, tol=1e-4, trials=5)


def test_matmul_examples():
    g = ad.Graph()
    a, b = g.variable((2, 2)), g.variable((2, 1))
    (out,) = g.eval({a: np.array([[1.0, 2], [3, 4]]), b: np.ones((2, 1))}, [a @ b])
    np.testing.assert_array_equal(out, [[3.0], [7.0]])
    eye, m = g.constant(np.eye(3)), g.variable((3, 3))
    val = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(g.eval({m: val}, [eye @ m])[0], val)


def test_matmul_shape_error_names_both_shapes():
    g = ad.Graph()
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        g.variable((2, 3)) @ g.variable((2, 3))


def test_sum_and_norm_gradients(rng):
    g = ad.Graph()
    x = g.variable((5,))
    (gs,) = ad.gradient(x.sum(), [x])
    (gn,) = ad.gradient(ad.square(x).sum(), [x])
    val = rng.standard_normal(5)
    ones, twice = g.eval({x: val}, [gs, gn])
    np.testing.assert_array_equal(ones, np.ones(5))
    np.testing.assert_array_equal(twice, 2 * val)


def test_second_derivative_of_cubic():
    g = ad.Graph()
    x = g.variable(())
    (dx,) = ad.gradient((x * x * x).sum(), [x])
    (d2x,) = ad.gradient(dx, [x])
    assert abs(float(g.eval({x: np.array(2.0)}, [d2x])[0]) - 12.0) < 1e-8


def test_sigmoid_second_derivative_analytic(rng):
    g = ad.Graph()
    x = g.variable((10,))
    (dx,) = ad.gradient(ad.sigmoid(x).sum(), [x])
    (d2,) = ad.gradient(dx.sum(), [x])
    val = 3 * rng.standard_normal(10)
    s = kernels.sigmoid(val)
    np.testing.assert_allclose(g.eval({x: val}, [d2])[0], s * (1 - s) * (1 - 2 * s), atol=1e-6)


def test_sigmoid_examples():
    g = ad.Graph()
    x = g.variable((3,))
    val = np.array([0.0, 2.0, -7.0])
    s, sm = g.eval({x: val}, [ad.sigmoid(x), ad.sigmoid(-x)])
    assert s[0] == 0.5
    np.testing.assert_allclose(s + sm, 1.0, atol=1e-15)


def test_cross_entropy_uniform_logits_and_gradient(rng):
    n2 = 7
    g = ad.Graph()
    a, t = g.variable((1, n2)), g.variable((1, n2))
    loss = ad.softmax_cross_entropy(a, t)
    (ga,) = ad.gradient(loss, [a])
    y = np.eye(n2)[[3]]
    val, _ = g.eval({a: np.full((1, n2), 0.4), t: y}, [loss, ga])
    assert abs(float(val) - np.log(n2)) < 1e-14
    logits = rng.standard_normal((1, n2))
    (grad,) = g.eval({a: logits, t: y}, [ga])
    np.testing.assert_allclose(grad, kernels.softmax_rows(logits) - y, atol=1e-15)


def test_conv_identity_and_bias(rng):
    g = ad.Graph()
    x = g.variable((1, 2, 5, 5))
    k1 = g.constant(np.eye(2).reshape(2, 2, 1, 1))
    r = g.variable((2,))
    val = rng.standard_normal((1, 2, 5, 5))
    (ident,) = g.eval({x: val}, [ad.conv2d(x, k1)])
    np.testing.assert_array_equal(ident, val)
    kern = g.constant(rng.standard_normal((2, 2, 3, 3)))
    bias = np.array([0.5, -2.0])
    (out,) = g.eval({x: np.zeros_like(val), r: bias}, [ad.conv2d(x, kern, r, stride=2, padding=1)])
    assert out.shape == (1, 2, 3, 3)
    np.testing.assert_array_equal(out[0, 0], 0.5)
    np.testing.assert_array_equal(out[0, 1], -2.0)


def test_conv_full_kernel_is_dense_layer(rng):
    C, d, h = 2, 4, 3
    g = ad.Graph()
    x, k, r = g.variable((1, C, d, d)), g.variable((h, C, d, d)), g.variable((h,))
    xv, kv, rv = rng.standard_normal((1, C, d, d)), rng.standard_normal((h, C, d, d)), rng.standard_normal(h)
    (out,) = g.eval({x: xv, k: kv, r: rv}, [ad.conv2d(x, k, r)])
    np.testing.assert_allclose(out.reshape(h), kv.reshape(h, -1) @ xv.ravel() + rv, atol=1e-12)


def test_conv_shape_errors():
    g = ad.Graph()
    with pytest.raises(ad.ShapeError):
        ad.conv2d(g.variable((1, 1, 3, 3)), g.variable((1, 1, 5, 5)))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(g.variable((1, 2, 4, 4)), g.variable((1, 3, 3, 3)))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(g.variable((1, 1, 4, 4)), g.variable((1, 1, 3, 3)), stride=0)


def test_gradient_requires_scalar_and_zero_for_unreachable():
    g = ad.Graph()
    x, y = g.variable((3,)), g.variable((2, 2))
    with pytest.raises(ad.ShapeError):
        ad.gradient(x, [x])
    gx, gy = ad.gradient(ad.square(x).sum(), [x, y])
    _, zero = g.eval({x: np.ones(3)}, [gx, gy])
    np.testing.assert_array_equal(zero, np.zeros((2, 2)))


def test_missing_leaf_is_named():
    g = ad.Graph()
    x = g.variable((2,), name="pixels")
    with pytest.raises(ad.MissingLeafError, match="pixels"):
        g.eval({}, [x.sum()])


def test_gradient_appends_without_changing_existing_nodes(rng):
    g = ad.Graph()
    x = g.variable((4,))
    out = ad.sigmoid(x).sum()
    before = [(g._records[i].op, g._records[i].parents) for i in range(len(g))]
    val = rng.standard_normal(4)
    first = g.eval({x: val}, [out])[0]
    ad.gradient(out, [x])
    assert [(g._records[i].op, g._records[i].parents) for i in range(len(before))] == before
    assert g.eval({x: val}, [out])[0] == first


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_evaluation_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    g = ad.Graph()
    x, w = g.variable((2, 3)), g.variable((3, 4))
    out = ad.softmax_cross_entropy(ad.sigmoid(x @ w), g.constant(np.eye(4)[[1, 2]]))
    grads = ad.gradient(out, [x, w])
    vals = {x: rng.standard_normal((2, 3)), w: rng.standard_normal((3, 4))}
    a = g.eval(vals, [out] + grads)
    b = g.eval(vals, [out] + grads)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
        assert np.all(np.isfinite(u))
