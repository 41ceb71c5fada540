"""Gradient checks for every primitive against central finite differences."""

import numpy as np
import pytest

from featcollapse import autodiff as ad


def fd_gradient(fn, x, h=1e-5):
    """Central finite-difference gradient of a scalar-valued fn at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def ad_scalar_gradient(graph, x):
    """Autodiff gradient of scalar graph(x) at x, in float64."""
    with ad.precision("float64"):
        xt = ad.Tensor(x, requires_grad=True)
        with ad.Tape():
            out = graph(xt)
        return ad.gradient(out, xt).values


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom


rng = np.random.default_rng(7)


SMOOTH_GRAPHS = {
    "exp": lambda x: ad.tsum(ad.exp(x)),
    "log": lambda x: ad.tsum(ad.log(ad.add(ad.mul(x, x), ad.Tensor(0.5, dtype=np.float64)))),
    "tanh": lambda x: ad.tsum(ad.tanh(x)),
    "sigmoid": lambda x: ad.tsum(ad.sigmoid(x)),
    "softplus": lambda x: ad.tsum(ad.softplus(x)),
    "sqrt": lambda x: ad.tsum(ad.sqrt(ad.add(ad.mul(x, x), ad.Tensor(0.3, dtype=np.float64)))),
    "sin": lambda x: ad.tsum(ad.sin(x)),
    "cos": lambda x: ad.tsum(ad.cos(x)),
    "mul": lambda x: ad.tsum(ad.mul(x, ad.exp(x))),
    "div": lambda x: ad.tsum(ad.div(ad.Tensor(np.ones((3, 4)), dtype=np.float64),
                                    ad.add(ad.mul(x, x), ad.Tensor(1.0, dtype=np.float64)))),
    "mean": lambda x: ad.tmean(ad.mul(x, x)),
    "sum_axis": lambda x: ad.tsum(ad.mul(ad.tsum(x, axis=0), ad.tsum(x, axis=0))),
    "reshape": lambda x: ad.tsum(ad.mul(ad.reshape(x, (4, 3)), ad.reshape(x, (4, 3)))),
    "logsumexp": lambda x: ad.tsum(ad.logsumexp(x, axis=1)),
}


@pytest.mark.parametrize("name", sorted(SMOOTH_GRAPHS))
def test_primitive_gradients_match_finite_differences(name):
    graph = SMOOTH_GRAPHS[name]
    x = rng.normal(size=(3, 4))

    def scalar(v):
        with ad.precision("float64"):
            with ad.Tape():
                return graph(ad.Tensor(v)).item()

    assert rel_err(ad_scalar_gradient(graph, x), fd_gradient(scalar, x)) < 1e-6


def test_relu_gradient_away_from_kink():
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 0.1] += 0.2  # keep clear of the kink

    def graph(t):
        return ad.tsum(ad.mul(ad.relu(t), t))

    def scalar(v):
        with ad.precision("float64"):
            with ad.Tape():
                return graph(ad.Tensor(v)).item()

    assert rel_err(ad_scalar_gradient(graph, x), fd_gradient(scalar, x)) < 1e-6


def test_matmul_trivial():
    a = ad.Tensor(np.ones((2, 3)))
    b = ad.Tensor(np.ones((3, 1)))
    with ad.Tape():
        out = ad.matmul(a, b)
    assert out.shape == (2, 1)
    assert np.allclose(out.values, 3.0)


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.Tensor(0.0)).item() == pytest.approx(0.5)


def test_matmul_gradient():
    w = rng.normal(size=(4, 4))

    def graph(x):
        return ad.tsum(ad.sigmoid(ad.matmul(ad.Tensor(w, dtype=np.float64), x)))

    def scalar(v):
        with ad.precision("float64"):
            with ad.Tape():
                return graph(ad.Tensor(v)).item()

    x = rng.normal(size=(4, 2))
    assert rel_err(ad_scalar_gradient(graph, x), fd_gradient(scalar, x)) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_nonfinite_is_checked():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.Tensor(np.array([-1.0])))


def test_gradient_accumulation_two_paths():
    # f(x) = x*x built as multiply(x, x): both paths must sum
    x = ad.Tensor(3.0, requires_grad=True, dtype=np.float64)
    with ad.Tape():
        out = ad.mul(x, x)
    assert ad.gradient(out, x).item() == pytest.approx(6.0)


def test_gradient_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        y = ad.mul(x, x)
    with pytest.raises(ad.NotScalarError):
        ad.gradient(y, x)


def test_gradient_unreachable():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    z = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        y = ad.tsum(ad.mul(x, x))
    with pytest.raises(ad.UnreachableError):
        ad.gradient(y, z)


def test_tape_reuse_for_multiple_targets():
    x = ad.Tensor(2.0, requires_grad=True, dtype=np.float64)
    w = ad.Tensor(5.0, requires_grad=True, dtype=np.float64)
    with ad.Tape():
        out = ad.mul(ad.mul(x, w), x)
    gx, gw = ad.gradient(out, [x, w])
    assert gx.item() == pytest.approx(20.0)
    assert gw.item() == pytest.approx(4.0)


def test_backward_does_not_mutate_forward_values():
    x = ad.Tensor(rng.normal(size=(3, 3)), requires_grad=True, dtype=np.float64)
    with ad.Tape():
        y = ad.tanh(x)
        out = ad.tsum(ad.mul(y, y))
    before = y.values.copy()
    ad.gradient(out, x)
    assert np.array_equal(y.values, before)


# ---------------------------------------------------------------------------
# convolution


def test_conv2d_gradients_match_finite_differences():
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))

    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        def graph_x(t):
            return ad.tsum(ad.tanh(ad.conv2d(t, ad.Tensor(w, dtype=np.float64),
                                             stride=stride, padding=pad)))

        def scalar_x(v):
            with ad.precision("float64"):
                with ad.Tape():
                    return graph_x(ad.Tensor(v)).item()

        assert rel_err(ad_scalar_gradient(graph_x, x), fd_gradient(scalar_x, x)) < 1e-6

        def graph_w(t):
            return ad.tsum(ad.tanh(ad.conv2d(ad.Tensor(x, dtype=np.float64), t,
                                             stride=stride, padding=pad)))

        def scalar_w(v):
            with ad.precision("float64"):
                with ad.Tape():
                    return graph_w(ad.Tensor(v)).item()

        assert rel_err(ad_scalar_gradient(graph_w, w), fd_gradient(scalar_w, w)) < 1e-6


def test_conv2d_transpose_is_exact_adjoint():
    # <conv(x), y> == <x, convT(y)> for the paired weight layouts
    with ad.precision("float64"):
        for stride, pad, k, h in [(2, 1, 4, 8), (1, 1, 3, 5), (2, 1, 3, 9)]:
            x = rng.normal(size=(2, 3, h, h))
            w = rng.normal(size=(5, 3, k, k))
            y = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=stride, padding=pad)
            cot = rng.normal(size=y.shape)
            back = ad.conv2d_transpose(ad.Tensor(cot), ad.Tensor(w),
                                       stride=stride, padding=pad, out_hw=(h, h))
            lhs = np.sum(y.values * cot)
            rhs = np.sum(x * back.values)
            assert abs(lhs - rhs) < 1e-9 * max(abs(lhs), 1.0)


def test_conv2d_transpose_gradients_match_finite_differences():
    x = rng.normal(size=(2, 4, 3, 3))
    w = rng.normal(size=(4, 2, 4, 4))

    def graph_x(t):
        return ad.tsum(ad.tanh(ad.conv2d_transpose(
            t, ad.Tensor(w, dtype=np.float64), stride=2, padding=1)))

    def scalar_x(v):
        with ad.precision("float64"):
            with ad.Tape():
                return graph_x(ad.Tensor(v)).item()

    assert rel_err(ad_scalar_gradient(graph_x, x), fd_gradient(scalar_x, x)) < 1e-6

    def graph_w(t):
        return ad.tsum(ad.tanh(ad.conv2d_transpose(
            ad.Tensor(x, dtype=np.float64), t, stride=2, padding=1)))

    def scalar_w(v):
        with ad.precision("float64"):
            with ad.Tape():
                return graph_w(ad.Tensor(v)).item()

    assert rel_err(ad_scalar_gradient(graph_w, w), fd_gradient(scalar_w, w)) < 1e-6


def test_concat_gradient():
    a = rng.normal(size=(3, 2))
    b = rng.normal(size=(3, 5))

    def graph(t):
        joined = ad.concat([t, ad.Tensor(b, dtype=np.float64)], axis=1)
        return ad.tsum(ad.mul(joined, joined))

    def scalar(v):
        with ad.precision("float64"):
            with ad.Tape():
                return graph(ad.Tensor(v)).item()

    assert rel_err(ad_scalar_gradient(graph, a), fd_gradient(scalar, a)) < 1e-6


# ---------------------------------------------------------------------------
# eig2x2


def test_eig2x2_diagonal():
    lmax, lmin = ad.eig2x2(ad.Tensor(4.0), ad.Tensor(1.0), ad.Tensor(0.0))
    assert lmax.item() == pytest.approx(4.0)
    assert lmin.item() == pytest.approx(1.0)


def test_eig2x2_matches_numpy_eigvalsh():
    a, b, c = rng.normal(size=3) + np.array([3.0, 1.0, 0.0])
    lmax, lmin = ad.eig2x2(ad.Tensor(a, dtype=np.float64),
                           ad.Tensor(b, dtype=np.float64),
                           ad.Tensor(c, dtype=np.float64))
    ref = np.linalg.eigvalsh(np.array([[a, c], [c, b]]))
    assert lmin.item() == pytest.approx(ref[0])
    assert lmax.item() == pytest.approx(ref[1])


def test_eig2x2_ratio_gradient_matches_finite_differences():
    abc = np.array([2.0, 0.7, 0.3])

    def graph(t):
        a = ad.tsum(ad.mul(t, ad.Tensor(np.array([1.0, 0, 0]), dtype=np.float64)))
        b = ad.tsum(ad.mul(t, ad.Tensor(np.array([0, 1.0, 0]), dtype=np.float64)))
        c = ad.tsum(ad.mul(t, ad.Tensor(np.array([0, 0, 1.0]), dtype=np.float64)))
        lmax, lmin = ad.eig2x2(a, b, c)
        return ad.div(lmax, lmin)

    def scalar(v):
        with ad.precision("float64"):
            with ad.Tape():
                return graph(ad.Tensor(v)).item()

    assert rel_err(ad_scalar_gradient(graph, abc), fd_gradient(scalar, abc)) < 1e-6


def test_eig2x2_degenerate_gradient_is_checked():
    a = ad.Tensor(1.0, requires_grad=True, dtype=np.float64)
    with ad.Tape():
        lmax, lmin = ad.eig2x2(a, a, ad.Tensor(0.0, dtype=np.float64))
        out = ad.div(lmax, ad.add(lmin, ad.Tensor(1e-30, dtype=np.float64)))
    with pytest.raises(ad.DegenerateEigenvaluesError):
        ad.gradient(out, a)


# ---------------------------------------------------------------------------
# vjp


def test_vjp_linear_decoder_is_matrix_transpose():
    A = rng.normal(size=(5, 3))
    z = ad.Tensor(rng.normal(size=(3, 1)), requires_grad=True, dtype=np.float64)
    with ad.Tape():
        out = ad.matmul(ad.Tensor(A, dtype=np.float64), z)
    v = rng.normal(size=(5, 1))
    got = ad.vjp(out, z, v)
    assert np.allclose(got.values, A.T @ v, atol=1e-12)


def test_vjp_zero_cotangent():
    z = ad.Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    with ad.Tape():
        out = ad.tanh(ad.matmul(z, ad.Tensor(rng.normal(size=(4, 6)))))
    got = ad.vjp(out, z, np.zeros(out.shape))
    assert np.all(got.values == 0)
    assert got.shape == z.shape


def test_vjp_matches_finite_difference_jacobian():
    # tiny MLP decoder 2 -> 8 -> 16
    w1 = rng.normal(size=(2, 8))
    b1 = rng.normal(size=(8,))
    w2 = rng.normal(size=(8, 16))
    b2 = rng.normal(size=(16,))

    def decode(zv):
        h = np.tanh(zv @ w1 + b1)
        return h @ w2 + b2

    z0 = rng.normal(size=(1, 2))
    h = 1e-5
    jac = np.zeros((16, 2))
    for i in range(2):
        zp = z0.copy()
        zp[0, i] += h
        zm = z0.copy()
        zm[0, i] -= h
        jac[:, i] = (decode(zp) - decode(zm)).ravel() / (2 * h)

    with ad.precision("float64"):
        z = ad.Tensor(z0, requires_grad=True)
        with ad.Tape():
            hid = ad.tanh(ad.add(ad.matmul(z, ad.Tensor(w1)), ad.Tensor(b1)))
            out = ad.add(ad.matmul(hid, ad.Tensor(w2)), ad.Tensor(b2))
        v = rng.normal(size=(1, 16))
        got = ad.vjp(out, z, v)
    want = (jac.T @ v.ravel()).reshape(1, 2)
    assert np.max(np.abs(got.values - want)) < 1e-5


def test_vjp_linear_in_cotangent():
    with ad.precision("float64"):
        z = ad.Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        with ad.Tape():
            out = ad.sigmoid(ad.matmul(z, ad.Tensor(rng.normal(size=(3, 7)))))
        u = rng.normal(size=(1, 7))
        v = rng.normal(size=(1, 7))
        a_, b_ = 1.3, -0.4
        lhs = ad.vjp(out, z, a_ * u + b_ * v).values
        rhs = a_ * ad.vjp(out, z, u).values + b_ * ad.vjp(out, z, v).values
    assert rel_err(lhs, rhs) < 1e-10


def test_frozen_inputs_skip_weight_gradients():
    w = ad.Tensor(rng.normal(size=(3, 3)))  # requires_grad False
    x = ad.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    with ad.Tape():
        out = ad.tsum(ad.matmul(w, x))
    ad.gradient(out, x)
    assert w.grad is None
    assert x.grad is not None
