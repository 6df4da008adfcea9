"""Drifts, the implicit monotone stepper and the flow map ``S(t, s; omega)``.

Two equations on the grid of :mod:`spdelab.grid`:

* ``sfde``: fast diffusion ``du = (Delta Phi(u) + g) dt``, pivot space ``H^-1``,
  ``V = L^alpha``.
* ``sple``: singular p-Laplace ``du = (div Phi(grad u) + G(u) + g) dt``, pivot
  space ``L^2``, ``V = W^{1,alpha}_0``.

The noise is removed pathwise: for additive noise we march ``Z = X - N`` and for
Stratonovich multiplicative noise ``Z = exp(-mu beta) X``.  Each implicit Euler
step is the resolvent problem ``y - dt * drift(y) = b``; the fast diffusion
resolvent is solved in the variable ``w = Phi(y)``, where the inverse
nonlinearity is smooth and the Newton matrix ``diag(Phi^{-1}'(w)) + dt(-Delta_h)``
is symmetric positive definite for every ``eps >= 0``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from . import grid as gt
from .grid import GridSpec
from .noise import NoisePath

EQUATIONS = ("sfde", "sple")
COUPLINGS = ("additive", "multiplicative")


class NonConvergence(RuntimeError):
    """Newton failed even after the maximal number of step bisections."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


# ---------------------------------------------------------------------------
# nonlinearities


def phi_fde(r, alpha: float, epsilon: float = 0.0):
    """``(|r|^2 + eps)^{(alpha-2)/2} r``; ``Phi(0) = 0`` also for ``eps = 0``."""
    r = np.asarray(r, dtype=float)
    if epsilon == 0.0:
        a = np.abs(r)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(a > 0, a ** (alpha - 2.0) * r, 0.0)
        return out if out.ndim else float(out)
    out = (r * r + epsilon) ** ((alpha - 2.0) / 2.0) * r
    return out if out.ndim else float(out)


def phi_sple(xi, alpha: float, epsilon: float = 0.0):
    """``(|xi|^2 + eps)^{-(2-alpha)/2} xi`` (one space dimension, so scalar gradients)."""
    return phi_fde(xi, alpha, epsilon)


def dphi(r, alpha: float, epsilon: float):
    """Derivative of :func:`phi_fde`; needs ``eps > 0`` at ``r = 0``."""
    r = np.asarray(r, dtype=float)
    r2 = r * r
    return (r2 + epsilon) ** ((alpha - 4.0) / 2.0) * ((alpha - 1.0) * r2 + epsilon)


def phi_inverse(w, alpha: float, epsilon: float):
    """Solve ``Phi_eps(r) = w`` componentwise.

    ``Phi_eps`` is odd, increasing and concave on ``r >= 0``; Newton started at
    the ``eps = 0`` inverse ``|w|^{1/(alpha-1)}`` (which lies left of the root)
    increases monotonically to it.
    """
    w = np.asarray(w, dtype=float)
    a = np.abs(w)
    r = a ** (1.0 / (alpha - 1.0))
    if epsilon > 0.0:
        for _ in range(100):
            step = (a - phi_fde(r, alpha, epsilon)) / dphi(r, alpha, epsilon)
            step = np.maximum(step, 0.0)
            r = r + step
            if np.all(step <= 1e-15 * r):
                break
    return np.sign(w) * r


def dphi_inverse(w, alpha: float, epsilon: float, y=None):
    """Derivative of :func:`phi_inverse`; ``y`` may pass the precomputed inverse."""
    if epsilon == 0.0:
        w = np.asarray(w, dtype=float)
        return np.abs(w) ** ((2.0 - alpha) / (alpha - 1.0)) / (alpha - 1.0)
    if y is None:
        y = phi_inverse(w, alpha, epsilon)
    return 1.0 / dphi(y, alpha, epsilon)


# ---------------------------------------------------------------------------
# specifications


@dataclass(frozen=True)
class Reaction:
    """Scalar reaction ``G`` acting pointwise on the state (p-Laplace only)."""

    fn: Callable
    deriv: Callable
    lipschitz: float
    growth_exponent: float = 1.25
    name: str = "custom"


@dataclass(frozen=True)
class SaturatingReaction:
    """``G(r) = scale * r / sqrt(r^2 + delta)``: bounded and Lipschitz (picklable)."""

    scale: float = 1.0
    delta: float = 1.0
    growth_exponent: float = 1.25
    name: str = "saturating"

    def fn(self, r):
        return self.scale * r / np.sqrt(r * r + self.delta)

    def deriv(self, r):
        return self.scale * self.delta / (r * r + self.delta) ** 1.5

    @property
    def lipschitz(self) -> float:
        return abs(self.scale) / np.sqrt(self.delta)


def saturating_reaction(scale: float = 1.0, delta: float = 1.0) -> SaturatingReaction:
    return SaturatingReaction(scale, delta)


@dataclass(frozen=True, eq=False)
class ConstantForcing:
    """Time-independent forcing ``g(t) = values``."""

    values: np.ndarray

    def __call__(self, t):
        return self.values


@dataclass(frozen=True)
class DriftSpec:
    equation: str
    alpha: float
    epsilon: float = 1e-6
    reaction: Optional[object] = None
    forcing: Optional[Callable] = None
    coupling: str = "additive"
    mu: float = 0.0
    lambda_floor: Optional[float] = None

    def __post_init__(self):
        if self.equation not in EQUATIONS:
            raise ValueError(f"equation must be one of {EQUATIONS}, got {self.equation!r}")
        if not 1.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie in (1, 2), got {self.alpha!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}, got {self.coupling!r}")
        if self.reaction is not None and self.equation != "sple":
            raise ValueError("a reaction term is only defined for the p-Laplace equation")
        if self.lambda_floor is not None and not self.lambda_floor > 0:
            raise ValueError("lambda_floor must be positive")
        if self.reaction is not None and not 1.0 < self.reaction.growth_exponent < self.alpha:
            raise ValueError("the reaction growth exponent must lie in (1, alpha)")

    @property
    def autonomous(self) -> bool:
        return self.forcing is None or isinstance(self.forcing, ConstantForcing)


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    newton_tol: float = 1e-11
    newton_max_iter: int = 50
    damping: float = 0.5
    max_bisections: int = 10

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.newton_tol < 1e-14:
            raise ValueError("newton_tol must be at least 1e-14")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


# ---------------------------------------------------------------------------
# pivot space and V norms


def h_inner(spec: DriftSpec, grid: GridSpec, u, v) -> float:
    if spec.equation == "sfde":
        return gt.inner_hminus1(grid, u, v)
    return float(grid.h * np.dot(u, v))


def h_norm(spec: DriftSpec, grid: GridSpec, u) -> float:
    if spec.equation == "sfde":
        return gt.norm_hminus1(grid, u)
    return gt.norm_l2(grid, u)


def v_norm(spec: DriftSpec, grid: GridSpec, u) -> float:
    if spec.equation == "sfde":
        return gt.norm_lalpha(grid, u, spec.alpha)
    return gt.norm_w1alpha(grid, u, spec.alpha)


def embedding_floor(spec: DriftSpec, grid: GridSpec) -> float:
    """``lam`` with ``||v||_V^alpha >= lam ||v||_H^alpha`` on this grid."""
    if spec.lambda_floor is not None:
        return spec.lambda_floor
    if spec.equation == "sfde":
        return gt.lambda_floor(grid, spec.alpha)
    return gt.sobolev_floor(grid, spec.alpha)


# ---------------------------------------------------------------------------
# drifts


def _forcing(spec, t):
    if spec.forcing is None:
        return 0.0
    return np.asarray(spec.forcing(t), dtype=float)


def drift(spec: DriftSpec, grid: GridSpec, u, t: float = 0.0) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if spec.equation == "sfde":
        out = -gt.apply_neg_laplacian(grid, phi_fde(u, spec.alpha, spec.epsilon))
    else:
        flux = phi_sple(gt.gradient(grid, u), spec.alpha, spec.epsilon)
        out = gt.divergence(grid, flux)
        if spec.reaction is not None:
            out = out + spec.reaction.fn(u)
    return out + _forcing(spec, t)


def transformed_drift(spec: DriftSpec, grid: GridSpec, z, t: float, path: NoisePath) -> np.ndarray:
    """Drift of the random PDE for ``Z`` at time ``t`` on the sample path."""
    _check_coupling(spec, path)
    z = np.asarray(z, dtype=float)
    if spec.coupling == "additive":
        return drift(spec, grid, z + path.at(t), t)
    m = np.exp(-spec.mu * path.at(t))
    return m * drift(spec, grid, z / m, t)


def _check_coupling(spec, path):
    if path.kind == "zero":
        return
    if spec.coupling == "additive" and path.is_scalar:
        raise ValueError("additive coupling needs a V-valued noise path")
    if spec.coupling == "multiplicative" and not path.is_scalar:
        raise ValueError("multiplicative coupling needs a scalar Brownian path")


# ---------------------------------------------------------------------------
# resolvent solves
#
# All solves work on a batch of states, shape (m, n).  The m tridiagonal
# systems are stacked block-diagonally into one banded solve; Newton masks and
# line searches are per row, and a converged row is frozen, so each row follows
# exactly the iterates it would follow on its own.


def _stacked_bands(main, off):
    """Banded storage of ``m`` independent symmetric tridiagonal blocks."""
    m, n = main.shape
    upper = np.zeros((m, n))
    upper[:, :-1] = off
    upper = upper.ravel()
    ab = np.zeros((3, m * n))
    ab[0, 1:] = upper[:-1]
    ab[1] = main.ravel()
    ab[2, :-1] = upper[:-1]
    return ab


def _solve_blocks(main, off, rhs):
    m, n = main.shape
    return solve_banded((1, 1), _stacked_bands(main, off), rhs.ravel(),
                        overwrite_ab=True, check_finite=False).reshape(m, n)


def _row_h_norms(spec, grid, r):
    if spec.equation == "sfde":
        inv = gt.solve_neg_laplacian(grid, r)
        return np.sqrt(np.maximum(grid.h * np.sum(inv * r, axis=1), 0.0))
    return np.sqrt(grid.h * np.sum(r * r, axis=1))


def residual(spec, grid, y, b, dt, t):
    """``y - b - dt * drift(y, t)``."""
    return y - b - dt * drift(spec, grid, y, t)


def resolvent(spec: DriftSpec, grid: GridSpec, b, dt: float, t: float, tol,
              max_iter: int = 50, damping: float = 0.5):
    """Solve ``y - dt * drift(y, t) = b`` by damped Newton.

    ``b`` is one state or a batch ``(m, n)``; ``tol`` is a scalar or per-row
    bound on the pivot-norm residual.  Returns ``(y, iterations)`` or raises
    :class:`NonConvergence`.
    """
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    bb = np.atleast_2d(b)
    tol = np.broadcast_to(np.asarray(tol, dtype=float), (bb.shape[0],))
    if spec.equation == "sfde":
        y, its = _newton(spec, grid, bb, dt, t, tol, max_iter, damping, _FdeSystem(spec, grid, bb, dt, t))
    else:
        if spec.epsilon <= 0:
            raise ValueError("the p-Laplace Newton solve needs epsilon > 0")
        y, its = _newton(spec, grid, bb, dt, t, tol, max_iter, damping, _PleSystem(spec, grid, bb, dt, t))
    return (y[0], int(its[0])) if single else (y, its)


class _FdeSystem:
    """Fast diffusion resolvent in ``w = Phi(y)``: ``Phi^{-1}(w) + dt K w = b + dt g``."""

    def __init__(self, spec, grid, b, dt, t):
        self.alpha, self.eps = spec.alpha, spec.epsilon
        self.grid, self.dt = grid, dt
        self.rhs = b + dt * _forcing(spec, t)
        self.off = np.full((b.shape[0], grid.size - 1), -dt / grid.h**2)

    def start(self):
        return phi_fde(self.rhs, self.alpha, self.eps)

    def evaluate(self, w, rows=slice(None)):
        y = phi_inverse(w, self.alpha, self.eps)
        return y, y + self.dt * gt.apply_neg_laplacian(self.grid, w) - self.rhs[rows]

    def direction(self, w, y, f, rows):
        main = dphi_inverse(w[rows], self.alpha, self.eps, y[rows]) + 2.0 * self.dt / self.grid.h**2
        return _solve_blocks(main, self.off[rows], -f[rows])


class _PleSystem:
    """p-Laplace resolvent in ``y`` itself; the Jacobian is tridiagonal and SPD up to ``G'``."""

    def __init__(self, spec, grid, b, dt, t):
        self.spec, self.grid, self.dt, self.t, self.b = spec, grid, dt, t, b

    def start(self):
        return self.b.copy()

    def evaluate(self, y, rows=slice(None)):
        return y, residual(self.spec, self.grid, y, self.b[rows], self.dt, self.t)

    def direction(self, y, _y, f, rows):
        spec, grid, dt = self.spec, self.grid, self.dt
        yr = y[rows]
        a = dphi(gt.gradient(grid, yr), spec.alpha, spec.epsilon)
        main = 1.0 + dt / grid.h**2 * (a[:, :-1] + a[:, 1:])
        if spec.reaction is not None:
            main = main - dt * spec.reaction.deriv(yr)
        off = -dt / grid.h**2 * a[:, 1:-1]
        return _solve_blocks(main, off, -f[rows])


def _newton(spec, grid, b, dt, t, tol, max_iter, damping, system):
    u = system.start()
    y, f = system.evaluate(u)
    merit = np.linalg.norm(f, axis=1)
    active = np.ones(len(b), dtype=bool)
    iters = np.zeros(len(b), dtype=int)
    for it in range(max_iter + 1):
        res = _row_h_norms(spec, grid, residual(spec, grid, y[active], b[active], dt, t))
        done = np.flatnonzero(active)[res <= tol[active]]
        active[done] = False
        iters[done] = it
        if not active.any():
            return y, iters
        if it == max_iter:
            break
        rows = np.flatnonzero(active)
        delta = system.direction(u, y, f, rows)
        lam = np.ones(len(rows))
        pending = np.ones(len(rows), dtype=bool)
        u_new, y_new, f_new = u[rows].copy(), y[rows].copy(), f[rows].copy()
        m_new = merit[rows].copy()
        for _ in range(40):
            sel = np.flatnonzero(pending)
            cand = u[rows[sel]] + lam[sel, None] * delta[sel]
            yc, fc = system.evaluate(cand, rows[sel])
            mc = np.linalg.norm(fc, axis=1)
            ok = (mc < merit[rows[sel]]) | (mc == 0.0)
            acc = sel[ok]
            u_new[acc], y_new[acc], f_new[acc], m_new[acc] = cand[ok], yc[ok], fc[ok], mc[ok]
            pending[acc] = False
            if not pending.any():
                break
            lam[sel[~ok]] *= damping
        if pending.any():
            break
        u[rows], y[rows], f[rows], merit[rows] = u_new, y_new, f_new, m_new
    raise NonConvergence(f"{spec.equation} Newton stalled at t={t!r}", time=t)


def _advance(spec, cfg, grid, z, t0, t1, noise_at, depth=0):
    """One implicit step ``t0 -> t1`` for a batch ``z`` of shape ``(m, n)``.

    ``noise_at(tau)`` gives the additive shift or the multiplicative factor at
    ``tau`` (piecewise constant, cadlag); it is read at each sub-step's right
    end.  On Newton failure the whole batch bisects the step.
    """
    dt = t1 - t0
    nv = noise_at(t1)
    if spec.coupling == "additive":
        b, tol = z + nv, cfg.newton_tol
    else:
        b, tol = z / nv, cfg.newton_tol / nv
    try:
        y, iters = resolvent(spec, grid, b, dt, t1, tol, cfg.newton_max_iter, cfg.damping)
    except NonConvergence:
        if depth >= cfg.max_bisections:
            raise NonConvergence(f"no convergence after {depth} bisections at t={t1!r}", time=t1)
        tm = t0 + 0.5 * dt
        zm, i1 = _advance(spec, cfg, grid, z, t0, tm, noise_at, depth + 1)
        z1, i2 = _advance(spec, cfg, grid, zm, tm, t1, noise_at, depth + 1)
        return z1, i1 + i2
    if spec.coupling == "additive":
        return y - nv, iters
    return nv * y, iters


def _noise_lookup(spec, path):
    """``tau -> `` noise term, using the last lattice point at or before ``tau``."""
    t_min, dt = path.t_min, path.dt
    vals = path.values

    def term(i):
        if spec.coupling == "additive":
            return vals[i] if not path.is_scalar else 0.0
        if path.kind == "zero":
            return 1.0
        return float(np.exp(-spec.mu * vals[i]))

    def noise_at(tau):
        i = int(np.floor((tau - t_min) / dt + 1e-7))
        return term(min(max(i, 0), len(vals) - 1))

    return term, noise_at


def step_implicit(spec: DriftSpec, cfg: SolverConfig, grid: GridSpec, z, t: float,
                  path: NoisePath, dt: Optional[float] = None):
    """Advance ``Z`` from ``t`` to ``t + dt``; returns ``(z_next, newton_iterations)``."""
    _check_coupling(spec, path)
    dt = cfg.dt if dt is None else dt
    _, noise_at = _noise_lookup(spec, path)
    z = np.asarray(z, dtype=float)
    z1, its = _advance(spec, cfg, grid, np.atleast_2d(z), t, t + dt, noise_at)
    return (z1[0], int(its[0])) if z.ndim == 1 else (z1, its)


# ---------------------------------------------------------------------------
# flow


@dataclass
class FlowTrajectory:
    times: np.ndarray
    states: np.ndarray
    z_states: np.ndarray
    energy_h: np.ndarray
    energy_v: np.ndarray
    solver_iters: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _solver_stride(cfg, path):
    k = round(cfg.dt / path.dt)
    if k < 1 or abs(k * path.dt - cfg.dt) > 1e-9 * path.dt:
        raise ValueError(f"solver dt={cfg.dt!r} must be a multiple of the noise dt={path.dt!r}")
    return k


def _march(spec, cfg, grid, x, s, t, path, keep, stop=None):
    """Shared time loop for a batch ``x`` (m, n).

    ``keep(k)`` decides which states are stored; ``stop(x_k)`` may end the
    march early (the last state is then stored).
    """
    _check_coupling(spec, path)
    if t < s:
        raise ValueError("flow needs s <= t")
    stride = _solver_stride(cfg, path)
    i0, i1 = path.index(s), path.index(t)
    if (i1 - i0) % stride:
        raise ValueError("t - s must be a multiple of the solver dt")
    idx = np.arange(i0, i1 + 1, stride)
    times = path.times[idx]
    term, noise_at = _noise_lookup(spec, path)

    def to_state(z, nv):
        return z + nv if spec.coupling == "additive" else z / nv

    def energies(z, xx):
        eh = _row_h_norms(spec, grid, z) ** 2
        if spec.equation == "sfde":
            ev = grid.h * np.sum(np.abs(xx) ** spec.alpha, axis=1)
        else:
            ev = grid.h * np.sum(np.abs(gt.gradient(grid, xx)) ** spec.alpha, axis=1)
        return eh, ev

    n0 = term(idx[0])
    z = x - n0 if spec.coupling == "additive" else n0 * x
    zs, xs = [z], [x.copy()]
    e = energies(z, x)
    eh, ev = [e[0]], [e[1]]
    iters = [np.zeros(len(x), dtype=int)]
    for k in range(1, len(idx)):
        try:
            z, it = _advance(spec, cfg, grid, z, times[k - 1], times[k], noise_at)
        except NonConvergence as exc:
            raise NonConvergence(str(exc), time=float(times[k])) from exc
        xk = to_state(z, term(idx[k]))
        halt = stop is not None and stop(xk)
        if keep(k) or halt or k == len(idx) - 1:
            zs.append(z)
            xs.append(xk)
        e = energies(z, xk)
        eh.append(e[0])
        ev.append(e[1])
        iters.append(it)
        if halt:
            times = times[: k + 1]
            break
    return times, np.array(xs), np.array(zs), np.array(eh), np.array(ev), np.array(iters)


def flow(spec: DriftSpec, cfg: SolverConfig, grid: GridSpec, x, s: float, t: float,
         path: NoisePath, record_states: bool = True) -> FlowTrajectory:
    """``S(r, s; omega) x`` for grid times ``s <= r <= t``.

    With ``record_states=False`` only the endpoints are kept in ``states`` and
    ``z_states``; energies and iteration counts are always recorded per step.
    """
    x = grid.check(x)
    times, xs, zs, eh, ev, its = _march(spec, cfg, grid, x[None, :], s, t, path,
                                        (lambda k: True) if record_states else (lambda k: False))
    return FlowTrajectory(times, xs[:, 0], zs[:, 0], eh[:, 0], ev[:, 0], its[:, 0])


def flow_batch(spec: DriftSpec, cfg: SolverConfig, grid: GridSpec, xs, s: float, t: float,
               path: NoisePath, record_states: bool = False, stop=None):
    """``flow`` for several initial states on the same path.

    Returns one :class:`FlowTrajectory` per member; Newton runs on the stacked
    batch.  ``stop(x)`` receives the batch after each step and may end the run
    before ``t``.
    """
    xs = grid.check(np.atleast_2d(xs))
    times, X, Z, eh, ev, its = _march(spec, cfg, grid, xs, s, t, path,
                                      (lambda k: True) if record_states else (lambda k: False), stop)
    return [FlowTrajectory(times, X[:, j], Z[:, j], eh[:, j], ev[:, j], its[:, j]) for j in range(xs.shape[0])]


# ---------------------------------------------------------------------------
# energy bookkeeping


def young_constant(alpha: float) -> float:
    """``c`` in ``2 a^{alpha-1} b <= a^alpha + c b^alpha``."""
    p = alpha / (alpha - 1.0)
    return 2.0**alpha / (alpha * p ** (alpha - 1.0))


def coercivity_factor(alpha: float) -> float:
    """``c~ = 2^{1-alpha}`` from ``||z||_V^alpha <= 2^{alpha-1}(||z+n||_V^alpha + ||n||_V^alpha)``."""
    return 2.0 ** (1.0 - alpha)


def analytic_energy_constant(spec: DriftSpec):
    """``C`` with ``d/dt ||Z||_H^2 <= -c~ ||Z||_V^alpha + C (1 + ||N||_V^alpha)``.

    Known in closed form for the additive equations without reaction or
    forcing; ``None`` otherwise.
    """
    if spec.coupling != "additive" or spec.reaction is not None or spec.forcing is not None:
        return None
    return young_constant(spec.alpha) + 1.0


def noise_v_norms(spec: DriftSpec, grid: GridSpec, path: NoisePath, idx=None) -> np.ndarray:
    vals = path.values if idx is None else path.values[idx]
    if path.is_scalar or vals.ndim == 1:
        return np.zeros(len(vals))
    return np.array([v_norm(spec, grid, v) for v in vals])


def calibrate_energy_constant(spec: DriftSpec, grid: GridSpec, traj: FlowTrajectory,
                              path: NoisePath) -> float:
    """Smallest ``C`` for which the recorded trace satisfies the discrete inequality.

    Per step ``E_{k+1} - E_k <= dt (-c~ ||Z_{k+1}||_V^alpha + C (1 + ||N_{k+1}||_V^alpha))``.
    """
    if len(traj.times) < 2:
        return 0.0
    idx = [path.index(t) for t in traj.times]
    nv = noise_v_norms(spec, grid, path, idx) ** spec.alpha
    zv = np.array([v_norm(spec, grid, z) for z in traj.z_states]) ** spec.alpha
    dt = np.diff(traj.times)
    lhs = np.diff(traj.energy_h) / dt + coercivity_factor(spec.alpha) * zv[1:]
    return float(max(0.0, np.max(lhs / (1.0 + nv[1:]))))


def dual_norm_probe(spec: DriftSpec, grid: GridSpec, f, probes) -> float:
    """Lower estimate of ``||f||_{V*}`` as ``max_v <f, v>_H / ||v||_V`` over probes."""
    best = 0.0
    for v in probes:
        nv = v_norm(spec, grid, v)
        if nv > 0:
            best = max(best, h_inner(spec, grid, f, v) / nv)
    return best


def growth_ratio(spec: DriftSpec, grid: GridSpec, u, probes) -> float:
    """``||drift(u)||_{V*}^{alpha/(alpha-1)} / (||u||_V^alpha + 1)`` with probed dual norm."""
    q = spec.alpha / (spec.alpha - 1.0)
    dn = dual_norm_probe(spec, grid, drift(spec, grid, u), probes)
    return dn**q / (v_norm(spec, grid, u) ** spec.alpha + 1.0)


def write_trajectory_csv(traj: FlowTrajectory, fh, state_every: int = 0) -> None:
    """Columns ``t, energy_h, energy_v, iters`` and, every ``state_every`` rows, the state."""
    writer = csv.writer(fh, lineterminator="\n")
    n = traj.states.shape[1]
    head = ["t", "energy_h", "energy_v", "iters"]
    if state_every:
        head += [f"x{i}" for i in range(1, n + 1)]
    writer.writerow(head)
    for k, t in enumerate(traj.times):
        row = [f"{t:.17g}", f"{traj.energy_h[k]:.17g}", f"{traj.energy_v[k]:.17g}", str(int(traj.solver_iters[k]))]
        if state_every:
            if k % state_every == 0 and k < len(traj.states):
                row += [f"{v:.17g}" for v in traj.states[k]]
            else:
                row += [""] * n
        writer.writerow(row)
