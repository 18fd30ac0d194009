"""Tape mechanics, convolution/resize oracles and finite-difference checks."""

import numpy as np
import pytest

from autolink.gradcheck import check_gradients, numerical_grad, relative_error
from autolink.numcore import (
    NonFiniteError,
    Param,
    Tensor,
    add,
    bilinear_matrix,
    concat_channels,
    conv2d,
    exp,
    inverse_softplus,
    leaky_relu,
    matmul,
    mean,
    mul,
    resize_bilinear,
    softplus,
    softplus_np,
    spatial_softmax,
    square,
    tsum,
)


def conv_oracle(x, w, stride, pad, bias=None):
    """Six nested loops straight from the definition of cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if bias is None else bias[oc]
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += w[oc, ic, i, j] * xp[b, ic, y * stride + i, xx * stride + j]
                    out[b, oc, y, xx] = acc
    return out


def bilinear_oracle_1d(n_in, n_out, i_out):
    """Weights for output sample ``i_out`` under half-pixel-center sampling."""
    src = (i_out + 0.5) * n_in / n_out - 0.5
    src = min(max(src, 0.0), n_in - 1)
    lo = int(np.floor(src))
    hi = min(lo + 1, n_in - 1)
    wts = np.zeros(n_in)
    wts[lo] += 1.0 - (src - lo)
    wts[hi] += src - lo
    return wts


class TestTape:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = mul(x, x)  # x used twice
        z = add(y, x)
        z.backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_param_grad_starts_at_zero(self):
        p = Param(np.ones((2, 3)))
        assert p.grad.shape == (2, 3)
        assert not p.grad.any()
        assert p.group == "net"

    def test_param_rejects_unknown_group(self):
        with pytest.raises(ValueError, match="group"):
            Param(np.zeros(2), group="bias")

    def test_non_finite_raises(self):
        with pytest.raises(NonFiniteError, match="exp"):
            exp(Tensor(np.array([1000.0])))

    def test_dtype_mismatch_rejected(self):
        a = Tensor(np.ones((1, 2, 3, 3), np.float32))
        b = Tensor(np.ones((1, 2, 3, 3), np.float64))
        with pytest.raises(TypeError):
            concat_channels(a, b)

    def test_broadcast_gradient_reduced_to_shape(self):
        a = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        tsum(mul(a, b)).backward()
        np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])


class TestElementwise:
    def test_softplus_values(self):
        x = np.array([-50.0, -1.0, 0.0, 1.0, 50.0])
        expected = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
        np.testing.assert_allclose(softplus_np(x), expected, rtol=1e-14)
        assert softplus_np(np.array([0.0]))[0] == pytest.approx(np.log(2.0), abs=1e-15)

    @pytest.mark.parametrize("y", [5e-5, 5e-4, 0.3, 1.0, 7.0, 25.0])
    def test_inverse_softplus_round_trip(self, y):
        assert softplus_np(np.array(inverse_softplus(y)))[()] == pytest.approx(y, rel=1e-10)

    def test_inverse_softplus_rejects_non_positive(self):
        with pytest.raises(ValueError):
            inverse_softplus(0.0)

    def test_leaky_relu(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
        y = leaky_relu(x, 0.2)
        np.testing.assert_allclose(y.data, [-0.4, 0.0, 3.0])
        y.backward()
        np.testing.assert_allclose(x.grad, [0.2, 1.0, 1.0])

    def test_spatial_softmax_normalizes_each_map(self, rng):
        h = Tensor(rng.standard_normal((2, 3, 5, 4)))
        s = spatial_softmax(h).data
        np.testing.assert_allclose(s.sum(axis=(-1, -2)), 1.0, rtol=1e-12)
        assert (s > 0).all()


class TestConv2d:
    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (3, 2, 5), (1, 2, 5)])
    def test_matches_loop_oracle(self, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        got = conv2d(Tensor(x), Tensor(w), stride, pad, Tensor(b)).data
        np.testing.assert_allclose(got, conv_oracle(x, w, stride, pad, b), rtol=1e-12, atol=1e-12)

    def test_output_size(self):
        y = conv2d(Tensor(np.zeros((1, 2, 64, 64))), Tensor(np.zeros((5, 2, 3, 3))), stride=2, pad=1)
        assert y.shape == (1, 5, 32, 32)

    def test_channel_mismatch_names_channels(self):
        with pytest.raises(ValueError, match="C=3.*I=2"):
            conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((1, 2, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_float32_close_to_float64(self, rng):
        x = rng.standard_normal((2, 4, 9, 9))
        w = rng.standard_normal((3, 4, 3, 3))
        lo = conv2d(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32)), 2, 1).data
        hi = conv2d(Tensor(x), Tensor(w), 2, 1).data
        assert lo.dtype == np.float32
        np.testing.assert_allclose(lo, hi, rtol=1e-4, atol=1e-4)


class TestResize:
    @pytest.mark.parametrize("n_in,n_out", [(4, 8), (8, 4), (5, 3), (3, 7), (16, 16)])
    def test_matrix_matches_per_sample_oracle(self, n_in, n_out):
        m = bilinear_matrix(n_in, n_out)
        for i in range(n_out):
            np.testing.assert_allclose(m[i], bilinear_oracle_1d(n_in, n_out, i), atol=1e-15)

    def test_rows_sum_to_one(self):
        np.testing.assert_allclose(bilinear_matrix(7, 13).sum(axis=1), 1.0)

    def test_constant_image_preserved(self):
        x = Tensor(np.full((1, 2, 4, 4), 0.7))
        np.testing.assert_allclose(resize_bilinear(x, 8, 8).data, 0.7)

    def test_upsample_by_two_interior_values(self):
        # half-pixel centers: output 1 sits at source 0.25, output 2 at 0.75
        x = Tensor(np.array([[[[0.0, 4.0]]]]))
        y = resize_bilinear(x, 1, 4).data[0, 0, 0]
        np.testing.assert_allclose(y, [0.0, 1.0, 3.0, 4.0])


class TestFiniteDifferences:
    """Analytic derivatives against central differences in double precision."""

    N_CONFIGS = 100

    def test_conv2d_both_strategies(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for trial in range(self.N_CONFIGS):
            stride = 1 + trial % 2
            k = (1, 3, 5)[trial % 3]
            x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
            w = Tensor(rng.standard_normal((2, 2, k, k)), requires_grad=True)
            b = Tensor(rng.standard_normal(2), requires_grad=True)
            worst = max(worst, check_gradients(lambda: conv2d(x, w, stride, k // 2, b), [x, w, b]))
        assert worst < 1e-3

    def test_resize_bilinear(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(self.N_CONFIGS):
            hi, wi = rng.integers(2, 7, size=2)
            ho, wo = rng.integers(1, 9, size=2)
            x = Tensor(rng.standard_normal((1, 2, hi, wi)), requires_grad=True)
            worst = max(worst, check_gradients(lambda: resize_bilinear(x, ho, wo), [x]))
        assert worst < 1e-3

    def test_softplus(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(self.N_CONFIGS):
            x = Tensor(rng.uniform(-6, 6, size=4), requires_grad=True)
            worst = max(worst, check_gradients(lambda: softplus(x), [x]))
        assert worst < 1e-3

    def test_composite_ops(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(self.N_CONFIGS):
            a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
            h = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)

            def build():
                m = matmul(square(a), b)
                s = spatial_softmax(h)
                return add(mean(m), mul(tsum(s * s), 2.0))

            worst = max(worst, check_gradients(build, [a, b, h]))
        assert worst < 1e-3

    def test_leaky_relu_away_from_kink(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(self.N_CONFIGS):
            x = rng.standard_normal(6)
            x[np.abs(x) < 1e-3] += 1e-2  # keep clear of the corner
            t = Tensor(x, requires_grad=True)
            worst = max(worst, check_gradients(lambda: leaky_relu(t, 0.2), [t]))
        assert worst < 1e-3

    def test_numerical_grad_on_known_function(self):
        arr = np.array([1.0, -2.0, 0.5])
        g = numerical_grad(lambda: float((arr**3).sum()), arr)
        np.testing.assert_allclose(g, 3 * arr**2, rtol=1e-7)

    def test_relative_error_scale(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
