"""2-D convolution/correlation primitives and masked operator pairs.

Contract: ``out(p) = sum_q k(q) * img_ext(p - q + center)`` where the
image is extended per the boundary rule ("reflect" = symmetric, "zero").
All solver paths use the zero boundary so that convolve/correlate and
forward_masked/adjoint_masked are exact adjoint pairs; reflect is for
synthesizing blurred data without border ringing.
"""
from __future__ import annotations

from typing import Literal

import numpy as np
from scipy.fft import next_fast_len, rfft2, irfft2
from scipy.signal import fftconvolve

Boundary = Literal["reflect", "zero"]

_PAD_MODE = {"reflect": "symmetric", "zero": "constant"}


def _check_pair(img: np.ndarray, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {img.shape}")
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be square, got shape {kernel.shape}")
    if kernel.shape[0] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kernel.shape[0]}")
    if kernel.shape[0] > min(img.shape):
        raise ValueError(
            f"kernel {kernel.shape[0]}x{kernel.shape[0]} larger than image {img.shape}"
        )
    return img, kernel


def validate_kernel(k: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Check the blur-kernel invariants: odd square, entries >= 0, sum 1."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be odd and square, got shape {k.shape}")
    if k.min() < 0.0:
        raise ValueError("kernel has negative entries")
    if abs(k.sum() - 1.0) > tol:
        raise ValueError(f"kernel sum {k.sum()!r} is not 1")
    return k


def convolve(img: np.ndarray, kernel: np.ndarray, boundary: Boundary = "reflect") -> np.ndarray:
    """Same-size 2-D convolution with the chosen boundary extension."""
    img, kernel = _check_pair(img, kernel)
    r = kernel.shape[0] // 2
    if r == 0:
        return img * kernel[0, 0]
    padded = np.pad(img, r, mode=_PAD_MODE[boundary])
    return fftconvolve(padded, kernel, mode="valid")


def correlate(img: np.ndarray, kernel: np.ndarray, boundary: Boundary = "reflect") -> np.ndarray:
    """Same-size 2-D correlation: convolution with the kernel rotated 180 degrees.

    With the zero boundary this is the exact adjoint of `convolve`; for
    the reflect boundary the exact adjoint is `convolve_adjoint`.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    return convolve(img, kernel[::-1, ::-1], boundary)


def _fold_axis(v: np.ndarray, r: int, axis: int) -> np.ndarray:
    """Adjoint of symmetric padding along one axis: fold margins back."""
    v = np.moveaxis(v, axis, 0)
    core = v[r : v.shape[0] - r].copy()
    if r > 0:
        core[:r] += v[r - 1 :: -1]
        core[-r:] += v[: v.shape[0] - r - 1 : -1]
    return np.moveaxis(core, 0, axis)


def convolve_adjoint(img: np.ndarray, kernel: np.ndarray, boundary: Boundary = "zero") -> np.ndarray:
    """Exact adjoint of `convolve` for the given boundary rule.

    Zero boundary: plain correlation. Reflect boundary: full correlation
    followed by folding the mirrored margins back into the image.
    """
    img, kernel = _check_pair(img, kernel)
    if boundary == "zero":
        return correlate(img, kernel, "zero")
    r = kernel.shape[0] // 2
    if r == 0:
        return img * kernel[0, 0]
    full = fftconvolve(img, kernel[::-1, ::-1], mode="full")
    return _fold_axis(_fold_axis(full, r, 0), r, 1)


def forward_masked(
    u: np.ndarray, kernel: np.ndarray, alpha: np.ndarray, boundary: Boundary = "zero"
) -> np.ndarray:
    """Masked blur operator A u = alpha * (u convolved with k)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != np.shape(u):
        raise ValueError(f"mask shape {alpha.shape} does not match image {np.shape(u)}")
    return alpha * convolve(u, kernel, boundary)


def adjoint_masked(
    r: np.ndarray, kernel: np.ndarray, alpha: np.ndarray, boundary: Boundary = "zero"
) -> np.ndarray:
    """Exact adjoint of `forward_masked` for the same boundary rule."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != np.shape(r):
        raise ValueError(f"mask shape {alpha.shape} does not match image {np.shape(r)}")
    return convolve_adjoint(alpha * r, kernel, boundary)


def gradient_wrt_kernel(
    u: np.ndarray, residual: np.ndarray, d: int, boundary: Boundary = "zero"
) -> np.ndarray:
    """Gradient of the quadratic data term with respect to a d x d kernel.

    G(q) = 2 * sum_p residual(p) * u_ext(p - q + center) with the image
    extended per the boundary rule. The residual is expected to be
    masked already.
    """
    u = np.asarray(u, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if u.shape != residual.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {residual.shape}")
    if d % 2 == 0 or d < 1:
        raise ValueError(f"kernel size must be odd and positive, got {d}")
    if d > min(u.shape):
        raise ValueError(f"kernel size {d} exceeds image {u.shape}")
    h, w = u.shape
    rad = d // 2
    if boundary == "reflect" and rad > 0:
        u_ext = np.pad(u, rad, mode="symmetric")
        full = fftconvolve(residual, u_ext[::-1, ::-1], mode="full")
        return 2.0 * full[h - 1 : h + 2 * rad, w - 1 : w + 2 * rad]
    full = fftconvolve(residual, u[::-1, ::-1], mode="full")
    return 2.0 * full[h - 1 - rad : h + rad, w - 1 - rad : w + rad]


class KernelOperator:
    """Convolve / exact-adjoint pair with a fixed kernel and cached FFTs.

    Numerically identical (to FFT rounding) to `convolve` and
    `convolve_adjoint` with the same boundary; used by the iterative
    solvers where the kernel is fixed across many operator applications.
    """

    def __init__(self, kernel: np.ndarray, shape: tuple[int, int], boundary: Boundary = "zero"):
        _, kernel = _check_pair(np.zeros(shape), kernel)
        self.shape = shape
        self.boundary: Boundary = boundary
        self.rad = kernel.shape[0] // 2
        h, w = shape
        d = kernel.shape[0]
        pad = 2 * self.rad if boundary == "reflect" else 0
        self._fshape = (next_fast_len(h + pad + d - 1), next_fast_len(w + pad + d - 1))
        self._otf = rfft2(kernel, self._fshape)
        self._otf_adj = rfft2(kernel[::-1, ::-1], self._fshape)

    def _crop(self, full: np.ndarray, offset: int) -> np.ndarray:
        h, w = self.shape
        return full[offset : offset + h, offset : offset + w]

    def convolve(self, img: np.ndarray) -> np.ndarray:
        if self.boundary == "reflect" and self.rad > 0:
            img = np.pad(img, self.rad, mode="symmetric")
            offset = 2 * self.rad
        else:
            offset = self.rad
        full = irfft2(rfft2(img, self._fshape) * self._otf, self._fshape)
        return self._crop(full, offset)

    def correlate(self, img: np.ndarray) -> np.ndarray:
        """Apply the exact adjoint of `convolve`."""
        h, w = self.shape
        r = self.rad
        if self.boundary == "reflect" and r > 0:
            full = irfft2(rfft2(img, self._fshape) * self._otf_adj, self._fshape)
            full = full[: h + 2 * r, : w + 2 * r]
            return _fold_axis(_fold_axis(full, r, 0), r, 1)
        full = irfft2(rfft2(img, self._fshape) * self._otf_adj, self._fshape)
        return self._crop(full, r)
