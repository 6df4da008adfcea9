"""Experiments on the flow: pullback ensembles, absorption, cocycle, contraction
and order checks, multiplicative extinction and the regularization study.

Every experiment is a deterministic function of its configuration.  Noise
realizations are indexed by ``omega = 0, 1, ...`` and seeded from the noise seed
and that index, so the same ``omega`` sees the same path in every experiment
and worker.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import comparison as cmp
from . import dynamics as dyn
from .grid import GridSpec, lambda_floor
from .noise import NoiseSpec, sample_path, shift_path

PULLBACK_SLACK = 1e-9
ORDER_SLACK = 1e-8
EXTINCTION_SLACK = 0.05


@dataclass(frozen=True)
class BallSpec:
    """Random members of the ``H``-ball: sine series with ``1/k`` decay, radius ``<= radius``."""

    radius: float = 1.0
    count: int = 10
    seed: int = 0
    modes: int = 8

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("ball radius must be nonnegative")
        if self.count < 1:
            raise ValueError("ball needs at least one member")
        if self.modes < 1:
            raise ValueError("ball needs at least one mode")


@dataclass(frozen=True)
class ExperimentConfig:
    drift: dyn.DriftSpec
    grid: GridSpec
    solver: dyn.SolverConfig
    noise: NoiseSpec
    ensemble: Union[BallSpec, tuple] = BallSpec()
    pullback_starts: tuple = (-1.0,)
    target_time: float = 0.0
    n_omega: int = 1
    extinction_atol: float = 1e-8

    def __post_init__(self):
        starts = tuple(float(s) for s in self.pullback_starts)
        if not starts:
            raise ValueError("pullback_starts must not be empty")
        if any(b >= a for a, b in zip(starts, starts[1:])):
            raise ValueError("pullback_starts must be strictly decreasing")
        if starts[0] > self.target_time:
            raise ValueError("pullback starts must not exceed the target time")
        object.__setattr__(self, "pullback_starts", starts)
        if not isinstance(self.ensemble, BallSpec):
            members = tuple(np.asarray(m, dtype=float) for m in self.ensemble)
            if not members:
                raise ValueError("ensemble must not be empty")
            for m in members:
                self.grid.check(m)
            object.__setattr__(self, "ensemble", members)
        if self.n_omega < 1:
            raise ValueError("n_omega must be positive")


def ball_members(ball: BallSpec, grid: GridSpec, norm) -> np.ndarray:
    """Deterministic sample of ``ball.count`` states with ``norm(u) <= radius``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(ball.seed), 0xBA11]))
    k = np.arange(1, ball.modes + 1)
    basis = np.sqrt(2.0) * np.sin(np.outer(k, np.pi * grid.x / grid.length))
    out = []
    for _ in range(ball.count):
        u = (rng.normal(size=ball.modes) / k) @ basis
        scale = ball.radius * rng.uniform() ** (1.0 / ball.modes)
        out.append(u * scale / norm(u))
    return np.array(out)


def members(cfg: ExperimentConfig) -> np.ndarray:
    if isinstance(cfg.ensemble, BallSpec):
        return ball_members(cfg.ensemble, cfg.grid, lambda u: dyn.h_norm(cfg.drift, cfg.grid, u))
    return np.array(cfg.ensemble)


def omega_seed(seed: int, omega: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(omega)]).generate_state(1, np.uint64)[0])


def noise_path(cfg: ExperimentConfig, omega: int, window):
    spec = replace(cfg.noise, seed=omega_seed(cfg.noise.seed, omega))
    grid = None if spec.is_scalar else cfg.grid
    return sample_path(spec, window, cfg.solver.dt, grid=grid)


def _pairwise_diameter(spec, grid, states) -> float:
    best = 0.0
    for i in range(len(states)):
        for j in range(i + 1, len(states)):
            best = max(best, dyn.h_norm(spec, grid, states[i] - states[j]))
    return best


def _map(fn, args, jobs):
    if jobs <= 1 or len(args) <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, args))


# ---------------------------------------------------------------------------
# reports


@dataclass
class PullbackReport:
    experiment: str
    rows: list = field(default_factory=list)
    diameters: dict = field(default_factory=dict)
    radii: dict = field(default_factory=dict)
    extinction_times: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    calibration: dict = field(default_factory=dict)
    invariants: dict = field(default_factory=dict)

    def add(self, omega, s, member, metric, value):
        self.rows.append((self.experiment, omega, s, member, metric, value))

    @property
    def passed(self) -> bool:
        return all(self.invariants.values())

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["experiment", "omega", "s", "member", "metric", "value"])
        for exp, omega, s, member, metric, value in self.rows:
            writer.writerow([exp, omega, _fmt(s), member, metric, _fmt(value)])

    def summary(self) -> dict:
        return {
            "experiment": self.experiment,
            "passed": self.passed,
            "invariants": dict(self.invariants),
            "violations": list(self.violations),
            "calibration": {k: _jsonable(v) for k, v in self.calibration.items()},
        }

    @classmethod
    def merge(cls, experiment, parts):
        rep = cls(experiment)
        for p in parts:
            rep.rows += p.rows
            rep.diameters.update(p.diameters)
            rep.radii.update(p.radii)
            rep.extinction_times.update(p.extinction_times)
            rep.violations += p.violations
            for k, v in p.calibration.items():
                rep.calibration.setdefault(k, v)
        return rep


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return float(v) if math.isfinite(v) else str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


# ---------------------------------------------------------------------------
# pullback


def absorption_params(cfg: ExperimentConfig, path, x0, c_energy: float, window):
    """Comparison data for ``||Z(t,s)x||_H^2``: ``beta = alpha/2``, ``h = c~ lam``,
    ``p = C (1 + ||N||_V^alpha)`` and ``q0`` bounding ``||x - N_s||_H^2`` on the window."""
    spec, grid = cfg.drift, cfg.grid
    lam = dyn.embedding_floor(spec, grid)
    i0, i1 = path.index(window[0]), path.index(window[1])
    times = path.times[i0:i1 + 1]
    nv = dyn.noise_v_norms(spec, grid, path, slice(i0, i1 + 1)) ** spec.alpha
    nh = max(dyn.h_norm(spec, grid, v) for v in path.values[i0:i1 + 1]) if not path.is_scalar else 0.0
    r0 = max(dyn.h_norm(spec, grid, x) for x in x0)
    return cmp.OdeParams(
        beta=spec.alpha / 2.0,
        q0=(r0 + nh) ** 2,
        h_fn=dyn.coercivity_factor(spec.alpha) * lam,
        p_fn=cmp.PiecewiseConstant.from_samples(times, c_energy * (1.0 + nv)),
    )


def _pullback_omega(args) -> PullbackReport:
    cfg, omega = args
    spec, grid, t = cfg.drift, cfg.grid, cfg.target_time
    x0 = members(cfg)
    starts = cfg.pullback_starts
    window = (starts[-1], t)
    path = noise_path(cfg, omega, window)
    rep = PullbackReport("pullback")

    ends, z_energy = {}, {}
    c_meas = 0.0
    for s in starts:
        record = s == starts[-1]
        try:
            trajs = dyn.flow_batch(spec, cfg.solver, grid, x0, s, t, path, record_states=record)
        except dyn.NonConvergence as exc:
            raise dyn.NonConvergence(f"omega={omega}, s={s}: {exc}", time=exc.time) from exc
        if record:
            # the longest run doubles as the burn-in for the energy constant
            c_meas = max(dyn.calibrate_energy_constant(spec, grid, tr, path) for tr in trajs)
        ends[s] = np.array([tr.final for tr in trajs])
        z_energy[s] = np.array([tr.energy_h[-1] for tr in trajs])

    c_an = dyn.analytic_energy_constant(spec)
    c_used = c_meas if c_an is None else max(c_meas, c_an)
    est = cmp.absorbing_radius(absorption_params(cfg, path, x0, c_used, window), t, window)
    rep.radii[omega] = est
    rep.calibration[f"energy_C_measured[{omega}]"] = c_meas
    rep.calibration["energy_C_analytic"] = c_an
    for name in ("radius", "s0", "a1", "s_p", "s_q", "h_used"):
        rep.add(omega, None, -1, name, getattr(est, name))
    rep.add(omega, None, -1, "windowed", est.windowed)
    rep.add(omega, None, -1, "energy_C", c_used)

    diams = []
    for s in starts:
        d = _pairwise_diameter(spec, grid, ends[s])
        diams.append(d)
        rep.add(omega, s, -1, "diameter", d)
        rep.add(omega, s, -1, "max_norm_h", max(dyn.h_norm(spec, grid, e) for e in ends[s]))
        for j, ez in enumerate(z_energy[s]):
            rep.add(omega, s, j, "z_energy_h", ez)
            if s <= est.s0 and ez > est.radius:
                rep.violations.append(f"absorption omega={omega} s={s} member={j}: {ez:.6g} > {est.radius:.6g}")
    rep.diameters[omega] = diams
    for k in range(1, len(diams)):
        if diams[k] > diams[k - 1] + PULLBACK_SLACK:
            rep.violations.append(f"diameter increase omega={omega} s={starts[k]}: {diams[k - 1]:.6g} -> {diams[k]:.6g}")
    return rep


def run_pullback(cfg: ExperimentConfig, jobs: int = 1) -> PullbackReport:
    """Pullback ensembles from every start to ``target_time`` for each ``omega``."""
    if cfg.drift.coupling != "additive":
        raise ValueError("pullback experiments need additive coupling")
    parts = _map(_pullback_omega, [(cfg, i) for i in range(cfg.n_omega)], jobs)
    rep = PullbackReport.merge("pullback", parts)
    rep.calibration["lambda_floor"] = dyn.embedding_floor(cfg.drift, cfg.grid)
    monotone = not any(v.startswith("diameter") for v in rep.violations)
    absorbed = not any(v.startswith("absorption") for v in rep.violations)
    ratios = [d[-1] / d[0] if d[0] > 0 else 0.0 for d in rep.diameters.values()]
    rep.calibration["median_decay_ratio"] = float(np.median(ratios))
    rep.invariants = {"diameter_non_increasing": monotone, "absorbed": absorbed}
    return rep


# ---------------------------------------------------------------------------
# cocycle, contraction, order


def check_cocycle(cfg: ExperimentConfig, x, s: float, t: float, omega: int = 0) -> float:
    """``||S(t,s;omega)x - S(t-s,0;theta_s omega)x||_H``."""
    if not cfg.drift.autonomous:
        raise ValueError("the cocycle identity needs an autonomous drift")
    if t < s:
        raise ValueError("need s <= t")
    if s == 0:
        return 0.0
    path = noise_path(cfg, omega, (min(s, 0.0), max(t, 0.0)) if s != t else (s, s + cfg.solver.dt))
    a = dyn.flow(cfg.drift, cfg.solver, cfg.grid, x, s, t, path, record_states=False).final
    b = dyn.flow(cfg.drift, cfg.solver, cfg.grid, x, 0.0, t - s, shift_path(path, s), record_states=False).final
    return dyn.h_norm(cfg.drift, cfg.grid, a - b)


def check_monotone_contractive(cfg: ExperimentConfig, x, y, s: float, t: float, omega: int = 0,
                               order_epsilons: Sequence[float] = (1e-5, 1e-6)):
    """``(contraction_ok, order_ok)`` along the trajectories from ``x`` and ``y``.

    Contraction uses ``cfg`` as given.  Order is checked only when ``x <= y``
    componentwise (``None`` otherwise) and must hold at every regularization in
    ``order_epsilons``.
    """
    spec, grid = cfg.drift, cfg.grid
    x, y = grid.check(x), grid.check(y)
    path = noise_path(cfg, omega, (s, t) if t > s else (s, s + cfg.solver.dt))
    tx, ty = dyn.flow_batch(spec, cfg.solver, grid, np.array([x, y]), s, t, path, record_states=True)
    dist = np.array([dyn.h_norm(spec, grid, a - b) for a, b in zip(tx.states, ty.states)])
    contraction_ok = bool(np.all(np.diff(dist) <= 10.0 * cfg.solver.newton_tol))
    if not np.all(x <= y):
        return contraction_ok, None
    order_ok = True
    for eps in order_epsilons:
        sp = replace(spec, epsilon=eps)
        lo, hi = dyn.flow_batch(sp, cfg.solver, grid, np.array([x, y]), s, t, path, record_states=True)
        order_ok &= bool(np.min(hi.states - lo.states) >= -ORDER_SLACK)
    return contraction_ok, order_ok


def contraction_profile(cfg: ExperimentConfig, x, y, s: float, t: float, omega: int = 0) -> np.ndarray:
    """Per-step increments of the ``H``-distance between the trajectories from ``x`` and ``y``."""
    spec, grid = cfg.drift, cfg.grid
    path = noise_path(cfg, omega, (s, t))
    tx, ty = dyn.flow_batch(spec, cfg.solver, grid, np.array([x, y]), s, t, path, record_states=True)
    dist = np.array([dyn.h_norm(spec, grid, a - b) for a, b in zip(tx.states, ty.states)])
    return np.diff(dist)


# ---------------------------------------------------------------------------
# extinction


def _extinction_omega(args) -> PullbackReport:
    cfg, omega, lam = args
    spec, grid = cfg.drift, cfg.grid
    s, t = cfg.pullback_starts[0], cfg.target_time
    atol = cfg.extinction_atol
    x0 = members(cfg)
    path = noise_path(cfg, omega, (s, t))
    rep = PullbackReport("extinction")
    norm_b = max(dyn.h_norm(spec, grid, x) for x in x0)

    def all_extinct(xb):
        return bool(np.all(dyn._row_h_norms(spec, grid, xb) <= atol))

    try:
        trajs = dyn.flow_batch(spec, cfg.solver, grid, x0, s, t, path, record_states=True, stop=all_extinct)
    except dyn.NonConvergence as exc:
        raise dyn.NonConvergence(f"omega={omega}: {exc}", time=exc.time) from exc
    times = trajs[0].times
    bound = cmp.extinction_bound(norm_b, spec.alpha, lam, spec.mu, path, s, times) if norm_b > 0 else np.zeros(len(times))
    t_ext = []
    worst = 0.0
    for j, tr in enumerate(trajs):
        norms = dyn._row_h_norms(spec, grid, tr.states)
        dead = np.flatnonzero(norms <= atol)
        tj = float(times[dead[0]]) if len(dead) else math.inf
        t_ext.append(tj)
        rep.add(omega, s, j, "extinction_time", tj)
        live = norms > atol
        excess = norms[live] ** 2 - (1.0 + EXTINCTION_SLACK) * bound[live]
        if np.any(excess > 0):
            k = np.flatnonzero(live)[np.argmax(excess)]
            rep.violations.append(f"bound omega={omega} member={j} t={times[k]:.6g}: "
                                  f"{norms[k] ** 2:.6g} > {bound[k]:.6g}")
        if np.any(live):
            with np.errstate(divide="ignore"):
                worst = max(worst, float(np.max(norms[live] ** 2 / bound[live])))
    path_time = max(t_ext)
    rep.extinction_times[omega] = path_time
    rep.add(omega, s, -1, "extinction_time", path_time)
    rep.add(omega, s, -1, "norm_b", norm_b)
    rep.add(omega, s, -1, "max_energy_over_bound", worst)
    if not math.isfinite(path_time):
        rep.violations.append(f"not extinct omega={omega} by t={t}")
    if spec.mu == 0.0 and norm_b > 0:
        t_closed = s + cmp.deterministic_extinction_time(norm_b, spec.alpha, lam)
        rep.add(omega, s, -1, "closed_form_time", t_closed)
        if path_time - s > (1.0 + EXTINCTION_SLACK) * (t_closed - s):
            rep.violations.append(f"late extinction omega={omega}: {path_time:.6g} > {t_closed:.6g}")
    return rep


def run_extinction(cfg: ExperimentConfig, jobs: int = 1, lam: Optional[float] = None) -> PullbackReport:
    """Forward runs of the multiplicative equation from ``pullback_starts[0]`` to ``target_time``."""
    spec = cfg.drift
    if spec.coupling != "multiplicative" or spec.equation != "sfde":
        raise ValueError("extinction experiments need the multiplicative fast diffusion equation")
    if lam is None:
        lam = spec.lambda_floor if spec.lambda_floor is not None else lambda_floor(cfg.grid, spec.alpha)
    parts = _map(_extinction_omega, [(cfg, i, lam) for i in range(cfg.n_omega)], jobs)
    rep = PullbackReport.merge("extinction", parts)
    rep.calibration["lambda_floor"] = lam
    rep.invariants = {
        "all_extinct": not any(v.startswith("not extinct") for v in rep.violations),
        "bound_respected": not any(v.startswith("bound") for v in rep.violations),
        "closed_form_time": not any(v.startswith("late") for v in rep.violations),
    }
    return rep


# ---------------------------------------------------------------------------
# regularization study


def run_regularization_study(cfg: ExperimentConfig, epsilons: Sequence[float], omega: int = 0,
                             member: int = 0, s: Optional[float] = None, t: Optional[float] = None):
    """``[(eps, sup_t ||Y^eps_t - Y^ref_t||_H)]`` with ``eps_ref = min(epsilons)``.

    Runs from ``s`` (default ``pullback_starts[0]``) to ``t`` (default
    ``target_time``) on one noise path and one ensemble member.
    """
    eps = [float(e) for e in epsilons]
    if len(eps) < 2:
        raise ValueError("need at least two regularization levels")
    if any(e < 0 for e in eps):
        raise ValueError("epsilons must be nonnegative")
    s = cfg.pullback_starts[0] if s is None else s
    t = cfg.target_time if t is None else t
    x = members(cfg)[member]
    path = noise_path(cfg, omega, (s, t))
    ref_eps = min(eps)

    def run(e):
        return dyn.flow(replace(cfg.drift, epsilon=e), cfg.solver, cfg.grid, x, s, t, path).states

    ref = run(ref_eps)
    cache = {ref_eps: ref}
    table = []
    for e in eps:
        if e not in cache:
            cache[e] = run(e)
        d = max(dyn.h_norm(cfg.drift, cfg.grid, a - b) for a, b in zip(cache[e], ref))
        table.append((e, float(d)))
    return table


def loglog_slope(table) -> float:
    """Least-squares slope of ``log(distance)`` against ``log(eps)``."""
    e = np.log([r[0] for r in table])
    d = np.log([r[1] for r in table])
    return float(np.polyfit(e, d, 1)[0])


def regularization_report(cfg: ExperimentConfig, epsilons, ref_eps: float, omega: int = 0) -> PullbackReport:
    table = run_regularization_study(cfg, list(epsilons) + [ref_eps], omega=omega)
    table = [r for r in table if r[0] != ref_eps]
    rep = PullbackReport("converge")
    for e, d in table:
        rep.add(omega, None, -1, f"distance[eps={e:.3g}]", d)
    dists = [d for _, d in table]
    decreasing = all(b < a for a, b in zip(dists, dists[1:]))
    fit = all(d > 0 for d in dists) and len({e for e, _ in table}) > 1
    slope = loglog_slope(table) if fit else float("nan")
    rep.add(omega, None, -1, "loglog_slope", slope)
    rep.calibration["loglog_slope"] = slope
    rep.invariants = {"strictly_decreasing": decreasing}
    if not decreasing:
        rep.violations.append("distances not strictly decreasing")
    return rep
