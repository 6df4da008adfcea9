"""Scalar comparison machinery for energy traces.

The energy ``v = ||Z||_H^2`` of a trajectory is a subsolution of
``y' = -h y^beta + p`` with ``beta = alpha/2``.  This module gives the closed
form of the unforced problem, an independent RK4 integrator, the absorbing
radius built from a forcing history and the explicit extinction bound for the
multiplicative equation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .noise import NoisePath, NoiseSpec, sample_path

DELTA = 1e-12


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous step function.

    ``values[0]`` holds on ``(-inf, breaks[0])``, ``values[i]`` on
    ``[breaks[i-1], breaks[i])`` and ``values[-1]`` on ``[breaks[-1], inf)``.
    """

    breaks: tuple = ()
    values: tuple = (0.0,)

    def __post_init__(self):
        b = tuple(float(x) for x in self.breaks)
        v = tuple(float(x) for x in self.values)
        if len(v) != len(b) + 1:
            raise ValueError("need exactly one more value than breakpoints")
        if any(b1 <= b0 for b0, b1 in zip(b, b[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, c: float) -> "PiecewiseConstant":
        return cls((), (c,))

    @classmethod
    def from_samples(cls, times, values) -> "PiecewiseConstant":
        """Step function equal to ``values[k]`` on ``[times[k], times[k+1])``.

        Before ``times[0]`` the first sample is used, after the last time the last.
        """
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        return cls(tuple(times[1:]), (values[0],) + tuple(values[1:]))

    def __call__(self, r):
        idx = np.searchsorted(np.asarray(self.breaks), r, side="right")
        out = np.asarray(self.values)[idx]
        return out if np.ndim(out) else float(out)

    def pieces(self, a: float, b: float):
        """``(lo, hi, value)`` for every piece meeting ``[a, b]``."""
        edges = [-np.inf, *self.breaks, np.inf]
        out = []
        for lo, hi, v in zip(edges[:-1], edges[1:], self.values):
            lo2, hi2 = max(lo, a), min(hi, b)
            if lo2 < hi2 or (lo2 == hi2 == a == b and lo <= a < hi):
                out.append((lo2, hi2, v))
        return out

    def integral(self, a: float, b: float) -> float:
        """Exact integral over ``[a, b]``."""
        if b < a:
            return -self.integral(b, a)
        return float(sum((hi - lo) * v for lo, hi, v in self.pieces(a, b)))

    def antiderivative(self, r, origin: float = 0.0):
        """``int_origin^r`` for an array of ``r`` (vectorized)."""
        r = np.asarray(r, dtype=float)
        b = np.asarray(self.breaks)
        v = np.asarray(self.values)

        def prim(x):
            # integral from the first breakpoint (or 0 when there is none)
            if len(b) == 0:
                return v[0] * x
            cum = np.concatenate([[0.0], np.cumsum(v[1:-1] * np.diff(b))])
            idx = np.searchsorted(b, x, side="right")
            base = np.where(idx == 0, 0.0, cum[np.maximum(idx - 1, 0)])
            left = np.where(idx == 0, b[0], b[np.maximum(idx - 1, 0)])
            return base + v[idx] * (x - left)

        return prim(r) - prim(np.asarray(origin, dtype=float))

    def minimum(self, a: float, b: float) -> float:
        return min(v for _, _, v in self.pieces(a, b))


def _as_pc(f) -> PiecewiseConstant:
    if isinstance(f, PiecewiseConstant):
        return f
    return PiecewiseConstant.constant(float(f))


@dataclass(frozen=True)
class OdeParams:
    beta: float
    q0: float
    h_fn: Union[PiecewiseConstant, float] = 1.0
    p_fn: Union[PiecewiseConstant, float] = 0.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta!r}")
        if self.q0 < 0:
            raise ValueError("q0 must be nonnegative")
        h, p = _as_pc(self.h_fn), _as_pc(self.p_fn)
        if min(h.values) < 0:
            raise ValueError("h must be nonnegative")
        object.__setattr__(self, "h_fn", h)
        object.__setattr__(self, "p_fn", p)


def ode_closed_form(params: OdeParams, s: float, r):
    """``(q0^{1-b} - (1-b) int_s^r h  v 0)^{1/(1-b)}`` for the unforced problem."""
    b = params.beta
    if any(v != 0.0 for v in params.p_fn.values):
        raise ValueError("the closed form holds only for p = 0")
    rs = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(rs < s):
        raise ValueError("need r >= s")
    integ = params.h_fn.antiderivative(rs, s)
    base = np.maximum(params.q0 ** (1.0 - b) - (1.0 - b) * integ, 0.0)
    out = base ** (1.0 / (1.0 - b))
    return out if np.ndim(r) else float(out[0])


def extinction_time(params: OdeParams, s: float) -> float:
    """First ``r`` where the closed form vanishes (``inf`` if it never does)."""
    b = params.beta
    need = params.q0 ** (1.0 - b) / (1.0 - b)
    if need == 0.0:
        return s
    acc = 0.0
    for lo, hi, v in params.h_fn.pieces(s, np.inf):
        if v > 0 and acc + v * (hi - lo) >= need:
            return lo + (need - acc) / v
        acc += v * (hi - lo)
    return np.inf


def _field(y, beta, h, p):
    return -h * np.where(y > 0.0, np.maximum(y, 0.0) ** beta, 0.0) + p


def rk4_batch(beta, y0, h_steps, p_steps, dt: float, every: int = 1) -> np.ndarray:
    """RK4 for many independent scalar problems at once.

    ``beta, y0`` have shape ``(m,)``; ``h_steps, p_steps`` hold the coefficient
    on each step, shape ``(m, n_steps)`` (or broadcastable).  Returns the states
    at every ``every``-th step, shape ``(m, n_steps // every + 1)``.
    """
    beta = np.asarray(beta, dtype=float)
    y = np.array(y0, dtype=float)
    n_steps = np.shape(h_steps)[-1]
    h_steps = np.broadcast_to(h_steps, (len(y), n_steps))
    p_steps = np.broadcast_to(p_steps, (len(y), n_steps))
    out = [y.copy()]
    for k in range(n_steps):
        h, p = h_steps[:, k], p_steps[:, k]
        k1 = _field(y, beta, h, p)
        k2 = _field(y + 0.5 * dt * k1, beta, h, p)
        k3 = _field(y + 0.5 * dt * k2, beta, h, p)
        k4 = _field(y + dt * k3, beta, h, p)
        y = np.maximum(y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 0.0)
        if (k + 1) % every == 0:
            out.append(y.copy())
    return np.array(out).T


def step_grid(s: float, t: float, dt: float) -> np.ndarray:
    n = round((t - s) / dt)
    if n < 0 or abs(n * dt - (t - s)) > 1e-9 * max(dt, abs(t - s)):
        raise ValueError("dt must divide t - s")
    return s + dt * np.arange(n + 1)


def ode_brute_force(params: OdeParams, s: float, t: float, dt: float, extra_decay=None):
    """RK4 trajectory of ``y' = -h y^beta + p - extra_decay`` on ``[s, t]``.

    Coefficients are frozen at each step's midpoint, so piecewise-constant data
    with breakpoints on the step grid is integrated without splitting error.
    ``y`` is clamped at zero.  Returns ``(times, values)``.
    """
    times = step_grid(s, t, dt)
    mids = times[:-1] + 0.5 * dt
    h = params.h_fn(mids)
    p = params.p_fn(mids)
    if extra_decay is not None:
        p = p - _as_pc(extra_decay)(mids)
    vals = rk4_batch(np.array([params.beta]), np.array([params.q0]),
                     np.atleast_2d(h), np.atleast_2d(p), dt)[0]
    return times, vals


# ---------------------------------------------------------------------------
# absorbing radius


@dataclass(frozen=True)
class AbsorptionEstimate:
    radius: float
    a1: float
    s_p: float
    s_q: float
    s0: float
    windowed: bool = False
    h_used: float = 1.0
    notes: tuple = field(default=())


def _violation_reach(p: PiecewiseConstant, a: float, b: float, kappa: float, eps: float, h: float) -> float:
    """Largest ``|r|`` in ``[a, b]`` with ``(p(r)/h)^kappa > eps * h |r|``."""
    reach = 0.0
    for lo, hi, v in p.pieces(a, b):
        val = max(v, DELTA)
        bound = (val / h) ** kappa / (eps * h)  # violation iff |r| < bound
        near = 0.0 if lo <= 0.0 <= hi else min(abs(lo), abs(hi))
        far = max(abs(lo), abs(hi))
        if near < bound:
            reach = max(reach, min(far, bound))
    return reach


def absorbing_radius(params: OdeParams, t: float, window) -> AbsorptionEstimate:
    """Radius ``R(t)`` and the intermediate times of the a-priori bound.

    A nonconstant ``h`` is replaced by its minimum over the window, which keeps
    the energy a subsolution.  Time is rescaled to unit ``h``; every reported
    time is in the original units.  ``q0`` is used as a constant initial
    bound ``q(s) = q0`` (a fixed ball).
    """
    w_min, w_max = (float(w) for w in window)
    if not w_min < w_max or w_max < t:
        raise ValueError("window must be [w_min, w_max] with w_min < w_max and t <= w_max")
    b = params.beta
    h = params.h_fn.minimum(w_min, t)
    if h <= 0:
        raise ValueError("h vanishes somewhere on the window; no absorption estimate")
    kappa = (1.0 - b) / b
    eps_p = 0.5 ** kappa * (1.0 - b) / 4.0
    notes = []

    reach = _violation_reach(params.p_fn, w_min, t, kappa, eps_p, h)
    s_p = -reach
    windowed = False
    if s_p - max(1.0, reach) < w_min:
        windowed = True
        notes.append("forcing tail not certified inside the window")

    # q(s)^{1-b} <= -(1-b)/4 * (h s) for s <= s_q
    s_q = -4.0 * params.q0 ** (1.0 - b) / ((1.0 - b) * h)
    s0 = min(s_q, 2.0 * t)
    a1 = min(s_p, t, 2.0 * t)
    lo = a1 - 1.0 / h
    if lo < w_min:
        windowed = True
        notes.append("sup interval leaves the window")
        lo = w_min
    vals = [max(v, DELTA) for _, _, v in params.p_fn.pieces(lo, t)]
    radius = max((2.0 * v / h) ** (1.0 / b) for v in vals)
    return AbsorptionEstimate(float(radius), float(a1), float(s_p), float(s_q), float(s0),
                              windowed, float(h), tuple(notes))


# ---------------------------------------------------------------------------
# multiplicative extinction


def _exp_integral(p_exp, mu, path: NoisePath, s, times):
    """Left-endpoint sums of ``exp(-mu (2-p)(beta_tau - beta_s))`` from ``s`` to each time."""
    i0 = path.index(s)
    beta = path.values
    integrand = np.exp(-mu * (2.0 - p_exp) * (beta[i0:] - beta[i0]))
    cum = np.concatenate([[0.0], np.cumsum(integrand[:-1] * path.dt)])
    idx = np.array([path.index(tt) - i0 for tt in np.atleast_1d(times)])
    if np.any(idx < 0):
        raise ValueError("times must not precede s")
    return cum[idx], beta[i0 + idx] - beta[i0]


def extinction_bound(norm_b: float, p_exp: float, lam: float, mu: float,
                     beta_path: NoisePath, s: float, t):
    """Bound on ``||S(t,s)x||_H^2`` for ``||x||_H <= norm_b`` (scalar or array ``t``).

    ``exp(2 mu (beta_t - beta_s)) * ((|B|^{2-p} - (1-p/2) lam I(t)) v 0)^{2/(2-p)}``
    with ``I(t) = int_s^t exp(-mu (2-p)(beta_tau - beta_s)) dtau`` by the left
    endpoint rule on the path grid.
    """
    if not 0 < p_exp < 2:
        raise ValueError("p must lie in (0, 2)")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not beta_path.is_scalar and beta_path.kind != "zero":
        raise ValueError("extinction bound needs a scalar Brownian path")
    integ, dbeta = _exp_integral(p_exp, mu, beta_path, s, t)
    core = np.maximum(norm_b ** (2.0 - p_exp) - (1.0 - p_exp / 2.0) * lam * integ, 0.0)
    out = np.exp(2.0 * mu * dbeta) * core ** (2.0 / (2.0 - p_exp))
    return out if np.ndim(t) else float(out[0])


def deterministic_extinction_time(norm_b: float, p_exp: float, lam: float) -> float:
    """Zero of the ``mu = 0`` bound: ``|B|^{2-p} / ((1 - p/2) lam)``."""
    return norm_b ** (2.0 - p_exp) / ((1.0 - p_exp / 2.0) * lam)


# ---------------------------------------------------------------------------
# divergence of exponential Brownian integrals


def _path_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1, np.uint64)[0])


def exp_integrals(q_exp: float, times, n_paths: int, seed: int, resolution: float = 2.0**-7) -> np.ndarray:
    """Trapezoidal ``int_0^t exp(q beta_r) dr`` per path, shape ``(n_paths, len(times))``.

    All horizons share the same Brownian paths.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    t_max = float(times.max())
    out = np.empty((n_paths, len(times)))
    for i in range(n_paths):
        spec = NoiseSpec("scalar_bm", seed=_path_seed(seed, i), resolution=resolution)
        path = sample_path(spec, (0.0, t_max), resolution)
        f = np.exp(q_exp * path.values)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * resolution)])
        out[i] = cum[[path.index(tt) for tt in times]]
    return out


def integral_divergence_mc(q_exp: float, t: float, K: float, n_paths: int, seed: int,
                           resolution: float = 2.0**-7) -> float:
    """Monte-Carlo estimate of ``P[int_0^t exp(q beta_r) dr <= K]``."""
    if n_paths < 100:
        raise ValueError("n_paths must be at least 100")
    vals = exp_integrals(q_exp, [t], n_paths, seed, resolution)[:, 0]
    return float(np.mean(vals <= K))


# ---------------------------------------------------------------------------
# oracle sweep


@dataclass(frozen=True)
class SweepCase:
    params: OdeParams
    extra_decay: PiecewiseConstant


def random_cases(n_cases: int, seed: int, dt: float, horizon: float, max_breaks: int = 4) -> list:
    """Random unforced problems with grid-aligned piecewise-constant ``h`` and extra decay."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0DE]))
    n_steps = round(horizon / dt)
    cases = []
    for _ in range(n_cases):
        beta = rng.uniform(0.1, 0.9)
        q0 = rng.uniform(0.0, 10.0)
        nb = int(rng.integers(0, max_breaks + 1))
        br = np.sort(rng.choice(np.arange(1, n_steps), nb, replace=False)) * dt
        h = PiecewiseConstant(tuple(br), tuple(rng.uniform(0.1, 5.0, nb + 1)))
        nr = int(rng.integers(0, max_breaks + 1))
        brr = np.sort(rng.choice(np.arange(1, n_steps), nr, replace=False)) * dt
        decay = PiecewiseConstant(tuple(brr), tuple(rng.uniform(0.0, 2.0, nr + 1) * (rng.random(nr + 1) < 0.7)))
        cases.append(SweepCase(OdeParams(beta, q0, h), decay))
    return cases


def comparison_sweep(cases, dt: float, horizon: float, every: int = 1) -> dict:
    """Batch RK4 of every case, exact and with extra decay, against the closed form.

    Returns per-case ``deviation`` (``max |exact - closed|``) and ``excess``
    (``max (sub - closed)``), both over times where the closed form is positive.
    """
    n_steps = round(horizon / dt)
    mids = (np.arange(n_steps) + 0.5) * dt
    beta = np.array([c.params.beta for c in cases])
    q0 = np.array([c.params.q0 for c in cases])
    h = np.array([c.params.h_fn(mids) for c in cases])
    r = np.array([c.extra_decay(mids) for c in cases])
    exact = rk4_batch(beta, q0, h, 0.0, dt, every)
    sub = rk4_batch(beta, q0, h, -r, dt, every)
    times = np.arange(exact.shape[1]) * dt * every
    deviation, excess = [], []
    for i, c in enumerate(cases):
        closed = ode_closed_form(c.params, 0.0, times)
        alive = closed > 0
        deviation.append(float(np.max(np.abs(exact[i] - closed)[alive])) if alive.any() else 0.0)
        excess.append(float(np.max((sub[i] - closed)[alive])) if alive.any() else 0.0)
    return {"beta": beta, "q0": q0, "deviation": np.array(deviation), "excess": np.array(excess)}
