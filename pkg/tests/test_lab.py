import io
from dataclasses import replace

import numpy as np
import pytest

from spdelab import comparison as cmp
from spdelab import dynamics as dyn
from spdelab import lab
from spdelab.grid import GridSpec, lambda_floor
from spdelab.noise import NoiseSpec

G = GridSpec(40)
DT = 2.0**-6


def make_cfg(equation="sfde", kind="wiener_v", eps=1e-6, ball=lab.BallSpec(1.0, 4), starts=(-1.0, -2.0),
             t=0.0, n_omega=1, coupling="additive", mu=0.0):
    drift = dyn.DriftSpec(equation, 1.5, epsilon=eps, coupling=coupling, mu=mu)
    noise = NoiseSpec(kind, modes=2, mode_amplitudes=(1.0, 0.5), seed=17, resolution=DT, mu=mu)
    return lab.ExperimentConfig(drift, G, dyn.SolverConfig(dt=DT), noise, ball, starts, t, n_omega)


def test_config_validation():
    with pytest.raises(ValueError):
        make_cfg(starts=(-2.0, -1.0))
    with pytest.raises(ValueError):
        make_cfg(starts=(1.0,), t=0.0)
    with pytest.raises(ValueError):
        make_cfg(ball=())
    with pytest.raises(ValueError):
        lab.BallSpec(-1.0)
    with pytest.raises(ValueError):
        make_cfg(n_omega=0)


def test_ball_members_inside_ball_and_deterministic():
    cfg = make_cfg(ball=lab.BallSpec(0.5, 30, seed=3))
    m = lab.members(cfg)
    assert m.shape == (30, G.size)
    norms = [dyn.h_norm(cfg.drift, G, x) for x in m]
    assert max(norms) <= 0.5 + 1e-12 and min(norms) > 0
    np.testing.assert_array_equal(m, lab.members(cfg))


def test_omega_paths_shared_between_experiments():
    cfg = make_cfg()
    a = lab.noise_path(cfg, 3, (-2.0, 0.0))
    b = lab.noise_path(cfg, 3, (-1.0, 1.0))
    np.testing.assert_array_equal(a.at(-0.5), b.at(-0.5))
    assert not np.array_equal(lab.noise_path(cfg, 4, (-2.0, 0.0)).at(-0.5), a.at(-0.5))


def test_pullback_single_member_has_zero_diameter():
    cfg = make_cfg(ball=(np.sin(np.pi * G.x),))
    rep = lab.run_pullback(cfg)
    assert rep.diameters[0] == [0.0, 0.0]
    assert rep.passed


def test_pullback_zero_noise_extinct_ensemble():
    cfg = make_cfg(kind="zero", eps=0.0, ball=lab.BallSpec(0.2, 5), starts=(-1.0, -2.0))
    lam = dyn.embedding_floor(cfg.drift, G)
    t_ext = cmp.extinction_time(cmp.OdeParams(0.75, 0.2**2, 2 * lam), 0.0)
    assert -t_ext > -1.0
    rep = lab.run_pullback(cfg)
    # the implicit resolvent never maps a nonzero state to exactly zero; what is left sits far below the solver tolerance
    assert max(rep.diameters[0]) <= 1e-12 * 0.2
    assert rep.passed


def test_pullback_wiener_monotone_diameters():
    cfg = make_cfg(starts=(-1.0, -2.0, -4.0), n_omega=2)
    rep = lab.run_pullback(cfg)
    assert rep.invariants["diameter_non_increasing"]
    for d in rep.diameters.values():
        assert all(b <= a + lab.PULLBACK_SLACK for a, b in zip(d, d[1:]))
        assert all(x >= 0 for x in d)
    assert rep.invariants["absorbed"]
    metrics = {r[4] for r in rep.rows}
    assert {"diameter", "radius", "s0", "z_energy_h", "energy_C"} <= metrics
    assert set(rep.radii) == {0, 1}


def test_pullback_parallel_matches_serial():
    cfg = make_cfg(n_omega=2)
    a, b = io.StringIO(), io.StringIO()
    lab.run_pullback(cfg, jobs=1).write_csv(a)
    lab.run_pullback(cfg, jobs=2).write_csv(b)
    assert a.getvalue() == b.getvalue()


def test_cocycle():
    x = np.sin(np.pi * G.x)
    cfg = make_cfg()
    assert lab.check_cocycle(cfg, x, 0.0, 1.0) == 0.0
    assert lab.check_cocycle(cfg, x, -2.0, 1.0) <= 1e-10
    assert lab.check_cocycle(make_cfg(kind="zero"), x, -1.0, 0.5) <= 1e-12
    assert lab.check_cocycle(make_cfg("sple"), x, -1.0, 0.5) <= 1e-10
    forced = replace(cfg, drift=replace(cfg.drift, forcing=lambda t: np.zeros(G.size) + t))
    with pytest.raises(ValueError):
        lab.check_cocycle(forced, x, -1.0, 0.0)


def test_monotone_contractive():
    cfg = make_cfg()
    x = np.sin(np.pi * G.x)
    assert lab.check_monotone_contractive(cfg, x, x, 0.0, 1.0) == (True, True)
    assert lab.check_monotone_contractive(cfg, G.zeros(), np.maximum(np.sin(3 * np.pi * G.x), 0), 0.0, 1.0) == (True, True)
    rng = np.random.default_rng(5)
    u, v = rng.normal(size=(2, G.size))
    ok, order = lab.check_monotone_contractive(cfg, u, v, 0.0, 1.0)
    assert ok and order is None
    ok, order = lab.check_monotone_contractive(make_cfg("sple"), u - 3, u, 0.0, 1.0)
    assert ok and order
    assert np.all(lab.contraction_profile(cfg, u, v, 0.0, 1.0) <= 10 * cfg.solver.newton_tol)


def test_extinction_zero_member_and_deterministic_bound():
    cfg = make_cfg(kind="scalar_bm", eps=1e-10, ball=(G.zeros(),), starts=(0.0,), t=1.0,
                   coupling="multiplicative", mu=1.0)
    rep = lab.run_extinction(cfg)
    assert rep.extinction_times[0] == 0.0
    cfg = make_cfg(kind="scalar_bm", eps=1e-10, ball=lab.BallSpec(0.3, 3), starts=(0.0,), t=2.0,
                   coupling="multiplicative", mu=0.0)
    lam = lambda_floor(G, 1.5)
    rep = lab.run_extinction(cfg, lam=lam)
    assert rep.passed, rep.violations
    norm_b = max(dyn.h_norm(cfg.drift, G, x) for x in lab.members(cfg))
    t_closed = cmp.deterministic_extinction_time(norm_b, 1.5, lam)
    assert rep.extinction_times[0] <= 1.05 * t_closed


def test_extinction_rejects_additive():
    with pytest.raises(ValueError):
        lab.run_extinction(make_cfg())


def test_regularization_study():
    cfg = make_cfg(starts=(0.0,), t=0.5)
    table = lab.run_regularization_study(cfg, [1e-4, 1e-4])
    assert all(d == 0.0 for _, d in table)
    table = lab.run_regularization_study(cfg, [1e-2, 1e-3, 1e-4, 1e-6])
    d = [r[1] for r in table if r[0] != 1e-6]
    assert d[0] > d[1] > d[2] > 0
    rep = lab.regularization_report(cfg, [1e-2, 1e-3, 1e-4], 1e-6)
    assert rep.invariants["strictly_decreasing"]
    assert np.isfinite(rep.calibration["loglog_slope"])
    with pytest.raises(ValueError):
        lab.run_regularization_study(cfg, [1e-3])


def test_loglog_slope_exact():
    table = [(e, 3.0 * e**0.37) for e in (1e-1, 1e-2, 1e-3)]
    assert lab.loglog_slope(table) == pytest.approx(0.37)


def test_report_csv_format():
    rep = lab.PullbackReport("x")
    rep.add(0, -1.0, 2, "m", 0.1)
    rep.add(1, None, -1, "flag", True)
    fh = io.StringIO()
    rep.write_csv(fh)
    assert fh.getvalue().splitlines() == [
        "experiment,omega,s,member,metric,value",
        "x,0,-1,2,m,0.10000000000000001",
        "x,1,,-1,flag,True",
    ]
