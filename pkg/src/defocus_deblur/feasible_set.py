"""Feasible set for defocus kernels: simplex, symmetry group, low rank.

A feasible kernel is nonnegative, sums to 1, has effective rank at most
r0, and is invariant under transpose, row flip, column flip and their
compositions (the dihedral group acting on the grid). The projection
chains a rank truncation, a symmetrization, and a clamp-and-normalize
step; the chain is iterated to a fixed point because a single pass of
the heuristic composition is not idempotent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateKernelError(ValueError):
    """Raised when a kernel iterate has no positive mass left to normalize."""


@dataclass(frozen=True)
class FeasibleSetParams:
    """Knobs of the feasible set.

    rank_cap bounds the adaptive rank from above; rank_threshold_ratio is
    the fraction of the largest singular value below which singular values
    do not count toward the effective rank. The use_* switches exist for
    ablation runs that drop one constraint.
    """

    rank_cap: int = 31
    rank_threshold_ratio: float = 1.0 / 30.0
    use_lowrank: bool = True
    use_symmetry: bool = True

    def __post_init__(self):
        if self.rank_cap < 1:
            raise ValueError("rank_cap must be >= 1")
        if not 0.0 < self.rank_threshold_ratio < 1.0:
            raise ValueError("rank_threshold_ratio must lie in (0, 1)")


def transpose(m: np.ndarray) -> np.ndarray:
    return np.asarray(m).T


def flip_rows(m: np.ndarray) -> np.ndarray:
    """Reverse row order: out(i, j) = m(rows - 1 - i, j)."""
    return np.asarray(m)[::-1]


def flip_cols(m: np.ndarray) -> np.ndarray:
    """Reverse column order: out(i, j) = m(i, cols - 1 - j)."""
    return np.asarray(m)[:, ::-1]


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Average the 8 dihedral images of a square matrix.

    The result is the orthogonal projection onto the subspace of matrices
    fixed by transpose, row flip, and column flip; idempotent and
    self-adjoint.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return (
        m
        + m.T
        + m[::-1]
        + m[:, ::-1]
        + np.rot90(m)
        + np.rot90(m, 2)
        + np.rot90(m, 3)
        + m[::-1, ::-1].T
    ) / 8.0


def symmetry_residual(m: np.ndarray) -> float:
    """Largest entrywise violation among the five symmetry identities."""
    m = np.asarray(m, dtype=np.float64)
    mt = m.T
    return max(
        np.abs(m - mt).max(),
        np.abs(m - m[::-1]).max(),
        np.abs(m - m[:, ::-1]).max(),
        np.abs(m - mt[::-1]).max(),
        np.abs(m - mt[:, ::-1]).max(),
    )


def effective_rank(m: np.ndarray, ratio: float = 1.0 / 30.0) -> int:
    """Number of singular values at least `ratio` times the largest; 0 for the zero matrix."""
    s = np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s >= ratio * s[0]))


def rank_truncate(m: np.ndarray, r0: int) -> np.ndarray:
    """Best rank-r0 approximation (keep the r0 largest singular values)."""
    m = np.asarray(m, dtype=np.float64)
    if r0 < 1:
        raise ValueError("r0 must be >= 1")
    if r0 >= min(m.shape):
        return m.copy()
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    s[r0:] = 0.0
    return (u * s) @ vt


def simplex_normalize(m: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero and rescale to unit sum."""
    m = np.maximum(np.asarray(m, dtype=np.float64), 0.0)
    total = m.sum()
    if total <= 0.0:
        raise DegenerateKernelError("kernel iterate has no positive entries")
    return m / total


def _project_once(m: np.ndarray, params: FeasibleSetParams) -> np.ndarray:
    if params.use_lowrank:
        r0 = min(params.rank_cap, max(1, effective_rank(m, params.rank_threshold_ratio)))
        m = rank_truncate(m, r0)
    if params.use_symmetry:
        m = symmetrize(m)
    return simplex_normalize(m)


def project_omega(
    m: np.ndarray,
    params: FeasibleSetParams = FeasibleSetParams(),
    tol: float = 1e-13,
    max_passes: int = 100,
) -> np.ndarray:
    """Project a square matrix onto the feasible kernel set.

    Each pass applies rank truncation (with the adaptive rank recomputed
    from the current iterate), symmetrization, and clamp-and-normalize,
    in that order. One pass leaves residual coupling between the steps,
    so the chain repeats until the iterate moves less than `tol` in
    Frobenius norm; a few passes suffice in practice.
    """
    x = np.asarray(m, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {x.shape}")
    if x.shape[0] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {x.shape[0]}")
    for _ in range(max_passes):
        x_next = _project_once(x, params)
        if np.linalg.norm(x_next - x) <= tol:
            return x_next
        x = x_next
    return x


def omega_violation(m: np.ndarray, ratio: float = 1.0 / 30.0, r0: int | None = None) -> dict:
    """Measure how far a matrix is from feasibility (for tests and assertions)."""
    m = np.asarray(m, dtype=np.float64)
    report = {
        "sum_error": abs(m.sum() - 1.0),
        "min_entry": float(m.min()),
        "symmetry_residual": symmetry_residual(m),
        "effective_rank": effective_rank(m, ratio),
    }
    if r0 is not None:
        report["rank_excess"] = max(0, report["effective_rank"] - r0)
    return report
