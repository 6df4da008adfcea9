"""Discrete Gelfand triples on a 1-D Dirichlet interval.

State vectors hold the ``n_cells - 1`` interior nodal values of a function on
``[0, length]``; the two boundary values are zero and never stored.  All norms
are plain Riemann sums with weight ``h`` so that golden values are bit-stable.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_banded


def _check_alpha(alpha):
    if not 1.0 < alpha < 2.0:
        raise ValueError(f"alpha must lie in (1, 2), got {alpha!r}")


@dataclass(frozen=True)
class GridSpec:
    n_cells: int
    length: float = 1.0

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 3:
            raise ValueError(f"n_cells must be an integer >= 3, got {self.n_cells!r}")
        if not self.length > 0:
            raise ValueError(f"length must be positive, got {self.length!r}")

    @property
    def h(self) -> float:
        return self.length / self.n_cells

    @property
    def size(self) -> int:
        """Number of interior unknowns."""
        return self.n_cells - 1

    @cached_property
    def x(self) -> np.ndarray:
        return self.h * np.arange(1, self.n_cells)

    @cached_property
    def _laplacian_bands(self) -> np.ndarray:
        # banded storage of -Delta_h for solve_banded((1, 1), ...)
        m = self.size
        inv_h2 = 1.0 / self.h**2
        ab = np.empty((3, m))
        ab[0, :] = -inv_h2
        ab[1, :] = 2.0 * inv_h2
        ab[2, :] = -inv_h2
        ab[0, 0] = 0.0
        ab[2, -1] = 0.0
        return ab

    @property
    def lambda1(self) -> float:
        """Smallest eigenvalue of -Delta_h."""
        return (2.0 - 2.0 * np.cos(np.pi * self.h / self.length)) / self.h**2

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def check(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.size:
            raise ValueError(f"state has {u.shape[-1]} entries, grid expects {self.size}")
        if not np.all(np.isfinite(u)):
            raise ValueError("state contains non-finite entries")
        return u


def gradient(grid: GridSpec, u) -> np.ndarray:
    """Forward differences on all ``n_cells`` cells, boundary zeros included."""
    u = np.asarray(u, dtype=float)
    out = np.empty(u.shape[:-1] + (u.shape[-1] + 1,))
    out[..., 0] = u[..., 0]
    out[..., 1:-1] = u[..., 1:] - u[..., :-1]
    out[..., -1] = -u[..., -1]
    return out / grid.h


def divergence(grid: GridSpec, flux) -> np.ndarray:
    """Backward difference of a cell-centred flux back to the interior nodes."""
    flux = np.asarray(flux, dtype=float)
    return (flux[..., 1:] - flux[..., :-1]) / grid.h


def norm_l2(grid: GridSpec, u) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(grid.h * np.sum(u * u)))


def norm_lalpha(grid: GridSpec, u, alpha: float) -> float:
    _check_alpha(alpha)
    u = np.asarray(u, dtype=float)
    return float((grid.h * np.sum(np.abs(u) ** alpha)) ** (1.0 / alpha))


def norm_w1alpha(grid: GridSpec, u, alpha: float) -> float:
    _check_alpha(alpha)
    g = gradient(grid, u)
    return float((grid.h * np.sum(np.abs(g) ** alpha)) ** (1.0 / alpha))


def apply_neg_laplacian(grid: GridSpec, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    out = 2.0 * u
    out[..., :-1] -= u[..., 1:]
    out[..., 1:] -= u[..., :-1]
    return out / grid.h**2


def solve_neg_laplacian(grid: GridSpec, f) -> np.ndarray:
    """Solve ``-Delta_h u = f`` with homogeneous Dirichlet data."""
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        return solve_banded((1, 1), grid._laplacian_bands, f)
    # solve_banded wants the right-hand sides as columns
    return solve_banded((1, 1), grid._laplacian_bands, f.reshape(-1, f.shape[-1]).T).T.reshape(f.shape)


def inner_hminus1(grid: GridSpec, u, v) -> float:
    return float(grid.h * np.dot(solve_neg_laplacian(grid, u), v))


def norm_hminus1(grid: GridSpec, u) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(max(inner_hminus1(grid, u, u), 0.0)))


def embedding_extremal(grid: GridSpec, alpha: float, tol: float = 1e-13, max_iter: int = 5000):
    """Maximise ``||u||_{H^-1} / ||u||_{L^alpha}`` over the grid.

    Works on the dual side: by discrete Hoelder duality the supremum equals
    ``max ||w||_{L^q} / ||w||_{H^1_0}`` with ``q = alpha / (alpha - 1)``, which is
    climbed monotonically by the nonlinear power iteration
    ``w <- (-Delta_h)^{-1} |w|^{q-2} w``.  Returns ``(constant, u_star)`` where
    ``u_star = |w|^{q-2} w`` is the maximiser on the primal side, normalised to
    unit ``H^-1`` norm.
    """
    _check_alpha(alpha)
    q = alpha / (alpha - 1.0)
    w = np.sin(np.pi * grid.x / grid.length)
    ratio_old = 0.0
    for _ in range(max_iter):
        w = w / np.sqrt(grid.h * np.dot(w, apply_neg_laplacian(grid, w)))
        ratio = (grid.h * np.sum(np.abs(w) ** q)) ** (1.0 / q)
        if abs(ratio - ratio_old) <= tol * ratio:
            break
        ratio_old = ratio
        w = solve_neg_laplacian(grid, np.abs(w) ** (q - 2.0) * w)
    u_star = np.abs(w) ** (q - 2.0) * w
    u_star = u_star / norm_hminus1(grid, u_star)
    constant = norm_hminus1(grid, u_star) / norm_lalpha(grid, u_star, alpha)
    return float(constant), u_star


def lambda_floor(grid: GridSpec, alpha: float) -> float:
    """Largest ``lam`` with ``||u||_{L^alpha}^alpha >= lam ||u||_{H^-1}^alpha`` on the grid."""
    constant, _ = embedding_extremal(grid, alpha)
    return float(constant ** (-alpha))


def sobolev_floor(grid: GridSpec, alpha: float) -> float:
    """Certified ``lam`` with ``||grad u||_{L^alpha}^alpha >= lam ||u||_{L^2}^alpha``.

    Uses ``||u||_2 <= sqrt(L) ||u||_inf`` and
    ``||u||_inf <= (L/2)^{1-1/alpha} ||grad u||_alpha`` (integrate the gradient
    from the nearer end, discrete Hoelder).  Not sharp, only used where a
    conservative floor is all that is needed.
    """
    _check_alpha(alpha)
    length = grid.length
    c = np.sqrt(length) * (length / 2.0) ** (1.0 - 1.0 / alpha)
    return float(c ** (-alpha))
