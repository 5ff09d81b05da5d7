"""Tests for the autodiff engine: primitive oracles and gradient checks."""

import numpy as np
import pytest

from tfse import autodiff as ad
from tfse.autodiff import (
    Tensor,
    apply_primitive,
    backward,
    grad_check,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def matmul_oracle(a, b):
    """Naive triple-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestBasicPrimitives:
    def test_softmax_symmetry(self):
        y = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(rng(1).normal(size=(5, 7)) * 10)
        y = ad.softmax(x)
        assert (y.data >= 0).all()
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(5), atol=1e-12)

    def test_flip_involution(self):
        x = rng(2).normal(size=(3, 4, 5))
        for axis in range(3):
            y = ad.flip(ad.flip(Tensor(x), axis=axis), axis=axis)
            assert (y.data == x).all()

    def test_matmul_against_triple_loop(self):
        a = rng(3).normal(size=(2, 3))
        b = rng(4).normal(size=(3, 4))
        y = ad.matmul(Tensor(a), Tensor(b))
        assert np.abs(y.data - matmul_oracle(a, b)).max() < 1e-12

    def test_matmul_shape_error_names_dimensions(self):
        with pytest.raises(ad.ShapeError, match="inner dimensions"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_unknown_primitive_rejected(self):
        with pytest.raises(ad.UnknownPrimitiveError):
            apply_primitive("frobnicate", [Tensor([1.0])])

    def test_apply_primitive_dispatch(self):
        y = apply_primitive("add", [Tensor([1.0, 2.0]), Tensor([3.0, 4.0])])
        np.testing.assert_array_equal(y.data, [4.0, 6.0])

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))

    def test_power_rejects_negative_base(self):
        with pytest.raises(ad.DomainError):
            ad.power(Tensor([-1.0]), 0.3)

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ad.DomainError):
            ad.log(Tensor([0.0]))

    def test_structural_ops_are_bijections(self):
        x = rng(5).normal(size=(2, 3, 4))
        r = ad.reshape(ad.reshape(Tensor(x), (4, 6)), x.shape)
        assert (r.data == x).all()
        t = ad.transpose(ad.transpose(Tensor(x), (2, 0, 1)), (1, 2, 0))
        assert (t.data == x).all()
        a, b = x[:1], x[1:]
        c = ad.concat([Tensor(a), Tensor(b)], axis=0)
        assert (c.data == x).all()

    def test_conv2d_identity_kernel(self):
        x = rng(6).normal(size=(2, 3, 5, 7))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = ad.conv2d(Tensor(x), Tensor(w))
        assert (y.data == x).all()

    def test_layer_norm_statistics(self):
        x = rng(7).normal(size=(4, 16))
        y = ad.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)))
        assert np.abs(y.data.mean(axis=-1)).max() < 1e-10
        assert np.abs(y.data.var(axis=-1) - 1.0).max() < 1e-8

    def test_atan2_matches_numpy(self):
        y = rng(8).normal(size=(3, 3))
        x = rng(9).normal(size=(3, 3))
        out = ad.atan2(Tensor(y), Tensor(x))
        np.testing.assert_array_equal(out.data, np.arctan2(y, x))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(rng(10).normal(size=(3, 4)), requires_grad=True)
        backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(ad.reduce_sum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-15)

    def test_softmax_conservation(self):
        x = Tensor(rng(11).normal(size=(2, 5)), requires_grad=True)
        backward(ad.reduce_sum(ad.softmax(x)))
        np.testing.assert_allclose(x.grad, np.zeros((2, 5)), atol=1e-12)

    def test_backward_rejects_non_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ad.ShapeError):
            backward(ad.mul(x, x))

    def test_repeated_backward_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = ad.reduce_sum(ad.mul(x, x))
        backward(y)
        backward(y)
        np.testing.assert_allclose(x.grad, [8.0])

    def test_shared_input_gradient_sums(self):
        x = Tensor([1.0, -1.0], requires_grad=True)
        y = ad.add(ad.mul(x, x), ad.scalar_mul(x, 3.0))
        backward(ad.reduce_sum(y))
        np.testing.assert_allclose(x.grad, [5.0, 1.0])


class TestGradCheck:
    def test_sigmoid_sum(self):
        x = rng(12).uniform(-1, 1, size=(2, 3))
        rep = grad_check(lambda t: ad.reduce_sum(ad.sigmoid(t)), Tensor(x), step=1e-5)
        assert rep.passed and rep.max_rel_err < 1e-6

    def test_layer_norm_sum_of_squares(self):
        x = rng(13).normal(size=(4, 8))
        g = Tensor(np.ones(8))
        b = Tensor(np.zeros(8))

        def f(t):
            y = ad.layer_norm(t, g, b)
            return ad.reduce_sum(ad.mul(y, y))

        rep = grad_check(f, Tensor(x), step=1e-5)
        assert rep.passed and rep.max_rel_err < 1e-5

    def test_constant_function(self):
        rep = grad_check(lambda t: Tensor(1.5), Tensor(np.ones(3)), step=1e-5)
        assert rep.passed and rep.max_rel_err == 0.0

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: ad.reduce_sum(t), Tensor(np.ones(2)), step=0.0)


def _fd_case(name, f, x, tol=1e-5):
    rep = grad_check(f, Tensor(x), step=1e-5, tol=tol)
    assert rep.passed, f"{name}: rel err {rep.max_rel_err:.3e} at {rep.worst_index}"


class TestFiniteDifferencesAllPrimitives:
    """Central-difference checks for every differentiable primitive."""

    def test_elementwise_binary(self):
        r = rng(20)
        a = r.normal(size=(3, 4))
        b = r.normal(size=(3, 4)) + 3.0
        for name, op in [("add", ad.add), ("sub", ad.sub), ("mul", ad.mul), ("div", ad.div)]:
            _fd_case(name, lambda t, op=op: ad.reduce_sum(op(t, Tensor(b))), a)
            _fd_case(name + "_rhs", lambda t, op=op: ad.reduce_sum(op(Tensor(a), t)), b)

    def test_broadcasting_gradients(self):
        r = rng(21)
        a = r.normal(size=(2, 3, 4))
        b = r.normal(size=(4,))
        _fd_case("bcast_lhs", lambda t: ad.reduce_sum(ad.mul(t, Tensor(b))), a)
        _fd_case("bcast_rhs", lambda t: ad.reduce_sum(ad.mul(Tensor(a), t)), b)

    def test_unary(self):
        r = rng(22)
        x = r.uniform(-2, 2, size=(2, 5))
        for name, f in [
            ("exp", lambda t: ad.reduce_sum(ad.exp(t))),
            ("tanh", lambda t: ad.reduce_sum(ad.tanh(t))),
            ("sigmoid", lambda t: ad.reduce_sum(ad.sigmoid(t))),
            ("softplus", lambda t: ad.reduce_sum(ad.softplus(t))),
            ("silu", lambda t: ad.reduce_sum(ad.silu(t))),
            ("sin", lambda t: ad.reduce_sum(ad.sin(t))),
            ("cos", lambda t: ad.reduce_sum(ad.cos(t))),
            ("scalar_mul", lambda t: ad.reduce_sum(ad.scalar_mul(t, -2.5))),
            ("softmax", lambda t: ad.reduce_sum(ad.mul(ad.softmax(t), ad.softmax(t)))),
        ]:
            _fd_case(name, f, x)
        _fd_case("log", lambda t: ad.reduce_sum(ad.log(t)), np.abs(x) + 0.5)
        _fd_case("power", lambda t: ad.reduce_sum(ad.power(t, 0.3)), np.abs(x) + 0.5)
        _fd_case("power_sq", lambda t: ad.reduce_sum(ad.power(t, 2.0)), np.abs(x) + 0.5)

    def test_prelu(self):
        r = rng(23)
        x = r.normal(size=(2, 3, 4, 5))
        s = r.uniform(0.1, 0.5, size=3)
        _fd_case("prelu_x", lambda t: ad.reduce_sum(ad.prelu(t, Tensor(s), axis=1)), x)
        _fd_case("prelu_slope",
                 lambda t: ad.reduce_sum(ad.prelu(Tensor(x), t, axis=1)), s)

    def test_atan2(self):
        r = rng(24)
        y = r.normal(size=(3, 3)) + 2.0
        x = r.normal(size=(3, 3)) + 2.0
        _fd_case("atan2_y", lambda t: ad.reduce_sum(ad.atan2(t, Tensor(x))), y)
        _fd_case("atan2_x", lambda t: ad.reduce_sum(ad.atan2(Tensor(y), t)), x)

    def test_matmul(self):
        r = rng(25)
        a = r.normal(size=(3, 4))
        b = r.normal(size=(4, 2))
        _fd_case("matmul_a", lambda t: ad.reduce_sum(ad.matmul(t, Tensor(b))), a)
        _fd_case("matmul_b", lambda t: ad.reduce_sum(ad.matmul(Tensor(a), t)), b)
        # batched
        ab = r.normal(size=(2, 3, 4))
        _fd_case("matmul_batched",
                 lambda t: ad.reduce_sum(ad.matmul(t, Tensor(b))), ab)

    def test_norms(self):
        r = rng(26)
        x = r.normal(size=(2, 6))
        g = r.uniform(0.5, 1.5, size=6)
        b = r.normal(size=6)
        _fd_case("layer_norm_x",
                 lambda t: ad.reduce_sum(ad.mul(ad.layer_norm(t, Tensor(g), Tensor(b)),
                                                ad.layer_norm(t, Tensor(g), Tensor(b)))), x)
        _fd_case("layer_norm_gamma",
                 lambda t: ad.reduce_sum(ad.layer_norm(Tensor(x), t, Tensor(b))), g)
        x4 = r.normal(size=(2, 3, 4, 5))
        g4 = r.uniform(0.5, 1.5, size=3)
        b4 = r.normal(size=3)
        _fd_case("instance_norm_x",
                 lambda t: ad.reduce_sum(ad.mul(ad.instance_norm(t, Tensor(g4), Tensor(b4)),
                                                ad.instance_norm(t, Tensor(g4), Tensor(b4)))),
                 x4)
        _fd_case("instance_norm_gamma",
                 lambda t: ad.reduce_sum(ad.instance_norm(Tensor(x4), t, Tensor(b4))), g4)

    def test_structural(self):
        r = rng(27)
        x = r.normal(size=(2, 3, 4))
        w = r.normal(size=(3, 4))

        def weighted(y, like):
            return ad.reduce_sum(ad.mul(y, Tensor(np.arange(like.size).reshape(like.shape))))

        _fd_case("reshape", lambda t: weighted(ad.reshape(t, (6, 4)), np.zeros((6, 4))), x)
        _fd_case("transpose",
                 lambda t: weighted(ad.transpose(t, (2, 0, 1)), np.zeros((4, 2, 3))), x)
        _fd_case("flip", lambda t: weighted(ad.flip(t, axis=1), x), x)
        _fd_case("slice",
                 lambda t: weighted(ad.slice_(t, (slice(0, 2), slice(1, 3))),
                                    np.zeros((2, 2))), w)
        other = r.normal(size=(3, 4))
        _fd_case("concat",
                 lambda t: weighted(ad.concat([t, Tensor(other)], axis=0),
                                    np.zeros((6, 4))), w)
        _fd_case("reduce_sum_axes",
                 lambda t: weighted(ad.reduce_sum(t, axes=(1,)), np.zeros((2, 4))), x)
        _fd_case("reduce_mean",
                 lambda t: weighted(ad.reduce_mean(t, axes=(0, 2)), np.zeros(3)), x)

    def test_conv2d(self):
        r = rng(28)
        x = r.normal(size=(2, 3, 6, 7))
        w = r.normal(size=(4, 3, 3, 3))
        b = r.normal(size=4)
        f_x = lambda t: ad.reduce_sum(ad.mul(
            ad.conv2d(t, Tensor(w), Tensor(b), stride=(2, 1),
                      padding=((2, 0), (1, 1)), dilation=(1, 2)),
            ad.conv2d(t, Tensor(w), Tensor(b), stride=(2, 1),
                      padding=((2, 0), (1, 1)), dilation=(1, 2))))
        _fd_case("conv2d_x", f_x, x)
        _fd_case("conv2d_w",
                 lambda t: ad.reduce_sum(ad.conv2d(Tensor(x), t, Tensor(b),
                                                   padding=((1, 1), (1, 1)))), w)
        _fd_case("conv2d_b",
                 lambda t: ad.reduce_sum(ad.conv2d(Tensor(x), Tensor(w), t)), b)

    def test_conv_transpose2d(self):
        r = rng(29)
        x = r.normal(size=(2, 3, 4, 5))
        w = r.normal(size=(3, 2, 1, 3))
        b = r.normal(size=2)
        _fd_case("convT_x",
                 lambda t: ad.reduce_sum(ad.mul(
                     ad.conv_transpose2d(t, Tensor(w), Tensor(b), stride=(1, 2)),
                     ad.conv_transpose2d(t, Tensor(w), Tensor(b), stride=(1, 2)))), x)
        _fd_case("convT_w",
                 lambda t: ad.reduce_sum(ad.conv_transpose2d(Tensor(x), t, stride=(1, 2))), w)

    def test_conv1d(self):
        r = rng(30)
        x = r.normal(size=(2, 4, 9))
        w_full = r.normal(size=(3, 4, 3))
        w_dw = r.normal(size=(4, 1, 4))
        _fd_case("conv1d_full_x",
                 lambda t: ad.reduce_sum(ad.conv1d(t, Tensor(w_full), padding=(1, 1))), x)
        _fd_case("conv1d_full_w",
                 lambda t: ad.reduce_sum(ad.conv1d(Tensor(x), t, padding=(1, 1))), w_full)
        _fd_case("conv1d_dw_x",
                 lambda t: ad.reduce_sum(ad.mul(
                     ad.conv1d(t, Tensor(w_dw), padding=(3, 0), groups=4),
                     ad.conv1d(t, Tensor(w_dw), padding=(3, 0), groups=4))), x)
        _fd_case("conv1d_dw_w",
                 lambda t: ad.reduce_sum(ad.conv1d(Tensor(x), t, padding=(3, 0), groups=4)),
                 w_dw)

    def test_frame_overlap_add(self):
        r = rng(31)
        x = r.normal(size=20)
        fr = r.normal(size=(4, 6))

        def weighted(y, shape):
            return ad.reduce_sum(ad.mul(y, Tensor(np.arange(np.prod(shape)).reshape(shape))))

        _fd_case("frame", lambda t: weighted(ad.frame(t, win=8, hop=4), (4, 8)), x)
        _fd_case("overlap_add",
                 lambda t: weighted(ad.overlap_add(t, hop=3, length=15), (15,)), fr)

    def test_selective_scan_inputs(self):
        r = rng(32)
        l, n, k = 5, 3, 2
        x = r.normal(size=(l, k))
        delta = r.uniform(0.1, 0.9, size=(l, k))
        b = r.normal(size=(l, n))
        c = r.normal(size=(l, n))
        a = -np.exp(r.normal(size=(n, k)) * 0.3)

        def mk(which):
            def f(t):
                args = {"x": Tensor(x), "delta": Tensor(delta), "b": Tensor(b),
                        "c": Tensor(c), "a": Tensor(a)}
                args[which] = t
                y = ad.selective_scan(args["x"], args["delta"], args["b"], args["c"],
                                      args["a"])
                return ad.reduce_sum(ad.mul(y, y))

            return f

        _fd_case("scan_x", mk("x"), x, tol=1e-4)
        _fd_case("scan_delta", mk("delta"), delta, tol=1e-4)
        _fd_case("scan_b", mk("b"), b, tol=1e-4)
        _fd_case("scan_c", mk("c"), c, tol=1e-4)
        _fd_case("scan_a", mk("a"), a, tol=1e-4)


class TestAdjointPairs:
    def test_frame_overlap_add_roundtrip(self):
        x = rng(33).normal(size=32)
        f = ad.frame(Tensor(x), win=8, hop=8)
        y = ad.overlap_add(f, hop=8, length=32)
        np.testing.assert_array_equal(y.data, x)

    def test_conv_transpose_is_conv_adjoint(self):
        # <conv(x), y> == <x, convT(y)> for matching layouts
        r = rng(34)
        x = r.normal(size=(1, 3, 6, 8))
        y = r.normal(size=(1, 2, 4, 3))
        w = r.normal(size=(2, 3, 3, 4))  # conv weight (cout, cin, kh, kw)
        # a transposed conv with the same weight array (read in its
        # (C_in, C_out, kh, kw) layout) is the adjoint of the strided conv
        cx = ad.conv2d(Tensor(x), Tensor(w), stride=(1, 2)).data
        ty = ad.conv_transpose2d(Tensor(y), Tensor(w), stride=(1, 2)).data
        lhs = float((cx * y).sum())
        rhs = float((x * ty).sum())
        assert abs(lhs - rhs) < 1e-9
