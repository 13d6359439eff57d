import numpy as np
import pytest

from defocus_deblur import conv


def reflect_index(i, n):
    # symmetric extension: -1 -> 0, -2 -> 1, n -> n-1, n+1 -> n-2
    if i < 0:
        return -1 - i
    if i >= n:
        return 2 * n - 1 - i
    return i


def conv_oracle(img, kernel, boundary):
    """Direct summation per the operator contract; the reference for all conv tests."""
    h, w = img.shape
    d = kernel.shape[0]
    r = d // 2
    out = np.zeros((h, w))
    for py in range(h):
        for px in range(w):
            acc = 0.0
            for qy in range(d):
                for qx in range(d):
                    iy, ix = py - qy + r, px - qx + r
                    if boundary == "zero":
                        if 0 <= iy < h and 0 <= ix < w:
                            acc += kernel[qy, qx] * img[iy, ix]
                    else:
                        acc += kernel[qy, qx] * img[reflect_index(iy, h), reflect_index(ix, w)]
            out[py, px] = acc
    return out


def delta(d):
    k = np.zeros((d, d))
    k[d // 2, d // 2] = 1.0
    return k


class TestConvolve:
    def test_delta_kernel_is_identity(self, rng):
        img = rng.random((7, 9))
        for boundary in ("zero", "reflect"):
            np.testing.assert_allclose(conv.convolve(img, delta(3), boundary), img, atol=1e-13)

    def test_constant_image_reflect(self, rng):
        img = np.full((6, 6), 0.7)
        k = rng.random((3, 3))
        k /= k.sum()
        np.testing.assert_allclose(conv.convolve(img, k, "reflect"), 0.7, atol=1e-13)

    def test_box_kernel_hand_values(self):
        img = np.array([[1, 2, 3], [4, 5, 6], [7, 8, 9]], dtype=float)
        k = np.full((3, 3), 1.0 / 9.0)
        out = conv.convolve(img, k, "zero")
        assert out[1, 1] == pytest.approx(5.0)
        assert out[0, 0] == pytest.approx((1 + 2 + 4 + 5) / 9.0)
        np.testing.assert_allclose(out, conv_oracle(img, k, "zero"), atol=1e-12)

    @pytest.mark.parametrize("boundary", ["zero", "reflect"])
    @pytest.mark.parametrize("d", [1, 3, 5])
    def test_matches_direct_oracle(self, rng, boundary, d):
        img = rng.random((8, 6))
        k = rng.standard_normal((d, d))
        np.testing.assert_allclose(
            conv.convolve(img, k, boundary), conv_oracle(img, k, boundary), atol=1e-12
        )

    def test_linearity(self, rng):
        u, v = rng.random((8, 8)), rng.random((8, 8))
        k = rng.random((5, 5))
        a, b = 1.7, -0.4
        lhs = conv.convolve(a * u + b * v, k, "zero")
        rhs = a * conv.convolve(u, k, "zero") + b * conv.convolve(v, k, "zero")
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_kernel_larger_than_image(self):
        with pytest.raises(ValueError, match="larger than image"):
            conv.convolve(np.zeros((3, 3)), np.zeros((5, 5)), "zero")

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            conv.convolve(np.zeros((5, 5)), np.zeros((2, 2)), "zero")


class TestCorrelate:
    def test_symmetric_kernel_equals_convolve(self, rng):
        img = rng.random((6, 6))
        k = rng.random((3, 3))
        k = k + k[::-1, ::-1]  # 180-degree invariant
        np.testing.assert_array_equal(
            conv.correlate(img, k, "zero"), conv.convolve(img, k, "zero")
        )

    def test_delta_identity(self, rng):
        img = rng.random((5, 5))
        np.testing.assert_allclose(conv.correlate(img, delta(3), "zero"), img, atol=1e-13)

    def test_adjoint_of_convolve(self, rng):
        for _ in range(20):
            u, v = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
            k = rng.standard_normal((3, 3))
            lhs = np.sum(conv.convolve(u, k, "zero") * v)
            rhs = np.sum(u * conv.correlate(v, k, "zero"))
            assert lhs == pytest.approx(rhs, abs=1e-12)


class TestMaskedOperators:
    def test_full_mask_is_plain_convolve(self, rng):
        u = rng.random((7, 7))
        k = rng.random((3, 3))
        np.testing.assert_array_equal(
            conv.forward_masked(u, k, np.ones((7, 7))), conv.convolve(u, k, "zero")
        )

    def test_zero_mask_is_zero(self, rng):
        u = rng.random((7, 7))
        assert np.all(conv.forward_masked(u, rng.random((3, 3)), np.zeros((7, 7))) == 0.0)

    def test_checkerboard_against_oracle(self, rng):
        u = rng.random((4, 4))
        k = rng.random((3, 3))
        alpha = np.indices((4, 4)).sum(axis=0) % 2.0
        expected = alpha * conv_oracle(u, k, "zero")
        np.testing.assert_allclose(conv.forward_masked(u, k, alpha), expected, atol=1e-12)

    def test_output_exactly_zero_outside_mask(self, rng):
        u = rng.random((9, 9))
        alpha = (rng.random((9, 9)) > 0.5).astype(float)
        out = conv.forward_masked(u, rng.random((3, 3)), alpha)
        assert np.all(out[alpha == 0] == 0.0)

    def test_adjoint_identity(self, rng):
        for _ in range(20):
            u, r = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
            k = rng.standard_normal((3, 3))
            alpha = (rng.random((8, 8)) > 0.4).astype(float)
            lhs = np.sum(conv.forward_masked(u, k, alpha) * r)
            rhs = np.sum(u * conv.adjoint_masked(r, k, alpha))
            assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_adjoint_zero_mask(self, rng):
        out = conv.adjoint_masked(rng.random((6, 6)), rng.random((3, 3)), np.zeros((6, 6)))
        assert np.all(out == 0.0)

    def test_adjoint_delta_full_mask_is_identity(self, rng):
        r = rng.random((6, 6))
        np.testing.assert_allclose(
            conv.adjoint_masked(r, delta(3), np.ones((6, 6))), r, atol=1e-13
        )


def data_term(u, k, b):
    resid = conv.convolve(u, k, "zero") - b
    return np.sum(resid * resid)


class TestGradientWrtKernel:
    def test_zero_residual_zero_gradient(self, rng):
        g = conv.gradient_wrt_kernel(rng.random((6, 6)), np.zeros((6, 6)), 3)
        assert np.all(g == 0.0)

    def test_scalar_case(self):
        g = conv.gradient_wrt_kernel(np.array([[3.0]]), np.array([[5.0]]), 1)
        np.testing.assert_allclose(g, [[30.0]])

    @pytest.mark.parametrize("d", [3, 5])
    def test_finite_differences(self, rng, d):
        u = rng.random((8, 8))
        k = rng.random((d, d))
        b = rng.random((8, 8))
        residual = conv.convolve(u, k, "zero") - b
        grad = conv.gradient_wrt_kernel(u, residual, d)
        eps = 1e-6
        for qy in range(d):
            for qx in range(d):
                kp, km = k.copy(), k.copy()
                kp[qy, qx] += eps
                km[qy, qx] -= eps
                fd = (data_term(u, kp, b) - data_term(u, km, b)) / (2 * eps)
                assert grad[qy, qx] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_size_exceeds_image(self):
        with pytest.raises(ValueError, match="exceeds"):
            conv.gradient_wrt_kernel(np.zeros((3, 3)), np.zeros((3, 3)), 5)


class TestKernelOperator:
    def test_matches_functional_api(self, rng):
        img = rng.random((12, 10))
        k = rng.random((5, 5))
        op = conv.KernelOperator(k, img.shape)
        np.testing.assert_allclose(op.convolve(img), conv.convolve(img, k, "zero"), atol=1e-12)
        np.testing.assert_allclose(op.correlate(img), conv.correlate(img, k, "zero"), atol=1e-12)


class TestValidateKernel:
    def test_accepts_valid(self):
        conv.validate_kernel(np.full((3, 3), 1.0 / 9.0))

    def test_rejects_negative(self):
        k = np.full((3, 3), 1.0 / 9.0)
        k[0, 0] = -k[0, 0]
        k[2, 2] += 2.0 / 9.0
        with pytest.raises(ValueError, match="negative"):
            conv.validate_kernel(k)

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError, match="sum"):
            conv.validate_kernel(np.full((3, 3), 1.0))
