"""Inner solvers: the l1-regularized image update (ADMM), the projected
gradient kernel update, and the closed-form sparse-residual update.

The per-layer model being minimized is

    0.5 * ||alpha .* (k (x) u) - alpha .* f - c||_F^2
        + lam1 * ||W u||_1  +  lam2 * ||k||_F^2  +  lam3 * ||c||_{0, weights}

over u (sharp layer image), k (kernel constrained to the feasible set),
and c (sparse residual absorbing segmentation errors).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .conv import Boundary, KernelOperator, convolve, gradient_wrt_kernel
from .feasible_set import (
    DegenerateKernelError,
    FeasibleSetParams,
    project_omega,
)

log = logging.getLogger(__name__)

# Linear-spline framelet filter bank; the three filters satisfy
# |H0|^2 + |H1|^2 + |H2|^2 = 1 at every frequency, so the undecimated
# transform with circular boundary is a tight frame (W^T W = I).
_FRAMELET_BANK = (
    np.array([1.0, 2.0, 1.0]) / 4.0,
    np.array([1.0, 0.0, -1.0]) * (np.sqrt(2.0) / 4.0),
    np.array([-1.0, 2.0, -1.0]) / 4.0,
)


@dataclass(frozen=True)
class SparsifyingTransform:
    """Choice of W in the l1 image prior: "finite-difference" or "framelet"."""

    kind: str = "framelet"

    def __post_init__(self):
        if self.kind not in ("finite-difference", "framelet"):
            raise ValueError(f"unknown transform kind {self.kind!r}")

    @property
    def n_subbands(self) -> int:
        return 2 if self.kind == "finite-difference" else 9


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 0.05
    inner_iters: int = 30
    cg_iters: int = 25
    cg_tol: float = 1e-6

    def __post_init__(self):
        if min(self.rho, self.inner_iters, self.cg_iters, self.cg_tol) <= 0:
            raise ValueError("AdmmConfig fields must all be positive")


@dataclass(frozen=True)
class PgaConfig:
    initial_step: float = 1e-3
    max_iters: int = 50
    stop_tol: float = 1e-7

    def __post_init__(self):
        if min(self.initial_step, self.max_iters, self.stop_tol) <= 0:
            raise ValueError("PgaConfig fields must all be positive")


def _circular_conv_axis(u: np.ndarray, h: np.ndarray, axis: int) -> np.ndarray:
    # 3-tap circular convolution, filter centered at index 1
    left = np.roll(u, 1, axis=axis)
    right = np.roll(u, -1, axis=axis)
    return h[0] * left + h[1] * u + h[2] * right


def transform_apply(u: np.ndarray, transform: SparsifyingTransform) -> np.ndarray:
    """Analysis operator W: stack of subband images, shape (n_subbands, H, W)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {u.shape}")
    if transform.kind == "finite-difference":
        out = np.zeros((2, *u.shape))
        out[0, :, :-1] = u[:, 1:] - u[:, :-1]
        out[0, :, -1] = -u[:, -1]
        out[1, :-1, :] = u[1:, :] - u[:-1, :]
        out[1, -1, :] = -u[-1, :]
        return out
    rows = [_circular_conv_axis(u, h, axis=0) for h in _FRAMELET_BANK]
    out = np.empty((9, *u.shape))
    for i, ri in enumerate(rows):
        for j, h in enumerate(_FRAMELET_BANK):
            out[3 * i + j] = _circular_conv_axis(ri, h, axis=1)
    return out


def transform_adjoint(coeffs: np.ndarray, transform: SparsifyingTransform) -> np.ndarray:
    """Exact adjoint of `transform_apply`."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 3 or coeffs.shape[0] != transform.n_subbands:
        raise ValueError(
            f"expected ({transform.n_subbands}, H, W) coefficients, got {coeffs.shape}"
        )
    if transform.kind == "finite-difference":
        # adjoint of the forward difference with zero boundary
        out = np.zeros(coeffs.shape[1:])
        cx = coeffs[0]
        out[:, 0] -= cx[:, 0]
        out[:, 1:] += cx[:, :-1] - cx[:, 1:]
        cy = coeffs[1]
        out[0, :] -= cy[0, :]
        out[1:, :] += cy[:-1, :] - cy[1:, :]
        return out
    out = np.zeros(coeffs.shape[1:])
    for i, hi in enumerate(_FRAMELET_BANK):
        acc = np.zeros_like(out)
        for j, hj in enumerate(_FRAMELET_BANK):
            acc += _circular_conv_axis(coeffs[3 * i + j], hj[::-1], axis=1)
        out += _circular_conv_axis(acc, hi[::-1], axis=0)
    return out


def soft_threshold(x: np.ndarray, tau: float) -> np.ndarray:
    """sign(x) * max(|x| - tau, 0), the l1 proximal map."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def hard_threshold_weighted(x: np.ndarray, weights: np.ndarray, lam3: float) -> np.ndarray:
    """Keep x[r] where |x[r]| > lam3 * weights[r], zero elsewhere (ties zero)."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0.0):
        raise ValueError("threshold weights must be positive")
    return np.where(np.abs(x) > lam3 * weights, x, 0.0)


@dataclass
class CgResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float


def cg_solve(
    apply_op: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    max_iters: int = 25,
    tol: float = 1e-6,
    x0: np.ndarray | None = None,
) -> CgResult:
    """Conjugate gradient for a symmetric positive definite operator on images."""
    b_norm = float(np.linalg.norm(rhs))
    if b_norm == 0.0:
        return CgResult(np.zeros_like(rhs), True, 0, 0.0)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=np.float64)
    r = rhs - apply_op(x)
    p = r.copy()
    rs = float(np.vdot(r, r).real)
    target = tol * b_norm
    for it in range(max_iters):
        if np.sqrt(rs) <= target:
            return CgResult(x, True, it, float(np.sqrt(rs)))
        ap = apply_op(p)
        denom = float(np.vdot(p, ap).real)
        if denom <= 0.0:
            log.warning("CG direction with nonpositive curvature; stopping early")
            return CgResult(x, False, it, float(np.sqrt(rs)))
        step = rs / denom
        x = x + step * p
        r = r - step * ap
        rs_new = float(np.vdot(r, r).real)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CgResult(x, np.sqrt(rs) <= target, max_iters, float(np.sqrt(rs)))


def admm_solve_u(
    kernel: np.ndarray,
    c: np.ndarray,
    alpha: np.ndarray,
    f: np.ndarray,
    lam1: float,
    transform: SparsifyingTransform,
    cfg: AdmmConfig = AdmmConfig(),
    u0: np.ndarray | None = None,
    boundary: Boundary = "zero",
) -> tuple[np.ndarray, dict]:
    """Approximately minimize 0.5*||A u - b||^2 + lam1*||W u||_1 over u.

    A u = alpha .* (k (x) u) under the given boundary rule and
    b = alpha .* f + c.
    Splitting z = W u, scaled dual y; the u step solves
    (A^T A + rho W^T W) u = A^T b + rho W^T (z - y) by conjugate gradient.
    Returns the iterate with the lowest composite objective, which is
    never worse than the warm start.
    """
    f = np.asarray(f, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    b = alpha * f + c
    op = KernelOperator(kernel, f.shape, boundary)

    def forward(u):
        return alpha * op.convolve(u)

    def adjoint(r):
        return op.correlate(alpha * r)

    def normal_op(u):
        wtw = transform_adjoint(transform_apply(u, transform), transform)
        return adjoint(forward(u)) + cfg.rho * wtw

    def objective(u, wu):
        fid = forward(u) - b
        return 0.5 * float(np.sum(fid * fid)) + lam1 * float(np.sum(np.abs(wu)))

    u = np.zeros_like(f) if u0 is None else np.array(u0, dtype=np.float64)
    wu = transform_apply(u, transform)
    z = wu.copy()
    y = np.zeros_like(z)
    atb = adjoint(b)

    best_u = u.copy()
    best_obj = objective(u, wu)
    cg_failures = 0
    for _ in range(cfg.inner_iters):
        rhs = atb + cfg.rho * transform_adjoint(z - y, transform)
        res = cg_solve(normal_op, rhs, max_iters=cfg.cg_iters, tol=cfg.cg_tol, x0=u)
        if not res.converged:
            cg_failures += 1
        u = res.x
        wu = transform_apply(u, transform)
        z = soft_threshold(wu + y, lam1 / cfg.rho)
        y = y + wu - z
        obj = objective(u, wu)
        if obj < best_obj:
            best_obj = obj
            best_u = u.copy()
    info = {"objective": best_obj, "cg_failures": cg_failures, "warnings": []}
    if cg_failures:
        msg = f"CG hit the iteration cap in {cg_failures}/{cfg.inner_iters} ADMM steps"
        info["warnings"].append(msg)
        log.warning(msg)
    return best_u, info


def pga_solve_k(
    u: np.ndarray,
    c: np.ndarray,
    alpha: np.ndarray,
    f: np.ndarray,
    lam2: float,
    k_init: np.ndarray,
    params: FeasibleSetParams = FeasibleSetParams(),
    cfg: PgaConfig = PgaConfig(),
    record_iterates: bool = False,
    boundary: Boundary = "zero",
) -> tuple[np.ndarray, dict]:
    """Projected gradient descent on the kernel over the feasible set.

    Minimizes ||alpha .* (u (x) k) - alpha .* f - c||_F^2 + lam2*||k||_F^2.
    Each step takes a gradient move with harmonically decaying step size
    and projects back onto the feasible set, so every iterate is feasible.
    With record_iterates the info dict carries every projected iterate.
    """
    u = np.asarray(u, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    b = alpha * np.asarray(f, dtype=np.float64) + c
    d = k_init.shape[0]

    # top curvature of the quadratic term by power iteration on
    # k -> 2 A^T A k; brackets the initial step so the harmonic decay
    # starts at a scale the data term can tolerate
    v = np.full((d, d), 1.0 / d)
    lam_max = 0.0
    for _ in range(8):
        av = gradient_wrt_kernel(u, alpha * convolve(u, v, boundary), d, boundary)
        norm = float(np.linalg.norm(av))
        if norm == 0.0:
            break
        lam_max = norm / float(np.linalg.norm(v))
        v = av / norm
    eta0 = cfg.initial_step
    if lam_max > 0.0:
        eta0 = min(eta0, 8.0 / lam_max)
    if lam2 > 0.0:
        # keep the ridge part of the step subcritical: it only rescales
        # the kernel (the projection renormalizes that away), but past
        # 1/(2*lam2) it flips the sign of every entry
        eta0 = min(eta0, 0.25 / lam2)

    k = np.array(k_init, dtype=np.float64)
    residual = alpha * convolve(u, k, boundary) - b
    warnings: list[str] = []
    iterates: list[np.ndarray] = []
    iters_done = 0
    for n in range(cfg.max_iters):
        grad = gradient_wrt_kernel(u, residual, d, boundary) + 2.0 * lam2 * k
        # steepest descent within the unit-sum constraint: without the
        # centering, the projection's divide-by-sum renormalization feeds
        # the gradient's mean back along +k and can reverse the descent
        grad = grad - grad.mean()
        # the safeguard watches the data term alone: on the unit-sum set
        # the ridge only damps the step (its radial pull cancels in the
        # projection's renormalization), and letting it drive descent
        # would push every kernel toward uniform
        current = float(np.sum(residual * residual))
        eta = eta0 / (n + 1.0)
        k_next = resid_next = None
        for _ in range(8):  # halve until the projected step does not increase the data term
            try:
                candidate = project_omega(k - eta * grad, params)
            except DegenerateKernelError:
                eta *= 0.5
                continue
            resid_candidate = alpha * convolve(u, candidate, boundary) - b
            if float(np.sum(resid_candidate * resid_candidate)) <= current + 1e-12:
                k_next, resid_next = candidate, resid_candidate
                break
            eta *= 0.5
        if k_next is None:
            msg = f"kernel step {n}: no descent step found; stopping"
            warnings.append(msg)
            log.debug(msg)
            break
        change = float(np.linalg.norm(k_next - k))
        k, residual = k_next, resid_next
        iters_done = n + 1
        if record_iterates:
            iterates.append(k.copy())
        if change <= cfg.stop_tol:
            break
    info = {"iterations": iters_done, "warnings": warnings}
    if record_iterates:
        info["iterates"] = iterates
    return k, info


def objective_eval(
    u: np.ndarray,
    kernel: np.ndarray,
    c: np.ndarray,
    alpha: np.ndarray,
    f: np.ndarray,
    lam1: float,
    lam2: float,
    lam3: float,
    weights: np.ndarray,
    transform: SparsifyingTransform,
    boundary: Boundary = "zero",
) -> float:
    """Full per-layer objective; the sparsity term counts weighted nonzeros."""
    alpha = np.asarray(alpha, dtype=np.float64)
    op = KernelOperator(kernel, np.shape(f), boundary)
    fid = alpha * op.convolve(u) - alpha * np.asarray(f, dtype=np.float64) - c
    data = 0.5 * float(np.sum(fid * fid))
    reg_u = lam1 * float(np.sum(np.abs(transform_apply(u, transform))))
    reg_k = lam2 * float(np.sum(kernel * kernel))
    reg_c = lam3 * float(np.sum(np.asarray(weights) * (np.asarray(c) != 0.0)))
    return data + reg_u + reg_k + reg_c
