import math

import numpy as np
import pytest

from metareflect import fields, geometry as geo, hierarchy as h, pde_mc as pm, quasipotential as qp
from metareflect.errors import CFLViolation, HorizonInfeasible
from metareflect.reflect_sde import SimConfig


def radial_cos(x):
    return np.cos(np.pi * np.linalg.norm(x, axis=-1))


@pytest.fixture(scope="module")
def heat():
    return pm.PdeProblem(fields.zero_field(), radial_cos, 0.5)


def test_time_zero_is_exact(heat):
    est = pm.estimate_u(heat, [0.3, 0.4], 0.0, 10, SimConfig(0.5))
    assert est.mean == pytest.approx(math.cos(0.5 * math.pi)) and est.stderr == 0.0


def test_constant_payoff_is_exact(six_eq):
    p = pm.PdeProblem(six_eq, lambda x: np.full(np.shape(x)[:-1], 2.5), 0.4)
    est = pm.estimate_u(p, [0.2, 0.1], 0.2, 50, SimConfig(0.4, 2e-3, 0.2))
    assert est.mean == 2.5 and est.stderr == 0.0
    u = pm.fd_oracle(p, pm.PolarGrid(20, 16), 0.2, 1e-2)
    np.testing.assert_allclose(u.values, 2.5, atol=1e-12)


def test_fd_matches_bessel_series(heat):
    u = pm.fd_oracle(heat, pm.PolarGrid(101, 100), 1.0, 1e-3)
    r = np.array([0.0, 0.3, 0.7, 0.95])
    ref = pm.radial_series(lambda s: math.cos(math.pi * s), 0.5, 1.0, r)
    got = u(np.stack([r, np.zeros_like(r)], axis=1))
    np.testing.assert_allclose(got, ref, atol=2e-4)


def test_bessel_series_reproduces_initial_data():
    r = np.linspace(0.05, 0.95, 7)
    got = pm.radial_series(lambda s: math.cos(math.pi * s), 0.5, 0.0, r, n_terms=120)
    np.testing.assert_allclose(got, np.cos(np.pi * r), atol=5e-3)


def test_fd_schemes_agree_and_conserve_mass(heat):
    grid = pm.PolarGrid(20, 16)
    cn = pm.fd_oracle(heat, grid, 0.5, 2e-3)
    im = pm.fd_oracle(heat, grid, 0.5, 2e-4, method="implicit")
    ex = pm.fd_oracle(heat, grid, 0.5, 2e-4, method="explicit")
    np.testing.assert_allclose(cn.values, im.values, atol=2e-4)
    np.testing.assert_allclose(cn.values, ex.values, atol=2e-4)
    u0 = pm.fd_oracle(heat, grid, 0.0)
    w = grid.radii[:, None]
    assert np.sum(cn.values * w) == pytest.approx(np.sum(u0.values * w), rel=1e-10)


def test_explicit_scheme_checks_stability(heat):
    with pytest.raises(CFLViolation):
        pm.fd_oracle(heat, pm.PolarGrid(60, 64), 0.1, 1e-2, method="explicit")
    with pytest.raises(ValueError):
        pm.fd_oracle(heat, pm.PolarGrid(20, 16), 0.1, 1e-2, method="spectral")


def test_fd_oracle_domain_and_metric_limits():
    with pytest.raises(ValueError):
        pm.fd_oracle(pm.PdeProblem(fields.zero_field(domain=geo.ellipse(2, 1)), radial_cos, 0.5))
    aniso = fields.zero_field(metric=geo.MetricField.diagonal([2.0, 1.0]))
    with pytest.raises(ValueError):
        pm.fd_oracle(pm.PdeProblem(aniso, radial_cos, 0.5), pm.PolarGrid(10, 8))
    with pytest.raises(ValueError):
        pm.PolarGrid(10, 7)


def test_scalar_metric_rescales_time(heat):
    iso = fields.zero_field(metric=geo.MetricField.constant(2.0 * np.eye(2)))
    grid = pm.PolarGrid(30, 16)
    # a = 2 I doubles the diffusion: same steps in k * D give identical fields
    a = pm.fd_oracle(pm.PdeProblem(iso, radial_cos, 0.5), grid, 0.2, 5e-4)
    b = pm.fd_oracle(heat, grid, 0.4, 1e-3)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


def test_grid_field_interpolation_and_csv():
    grid = pm.PolarGrid(8, 8)
    pts = grid.points()
    vals = pts[..., 0] + 2 * pts[..., 1]
    fld = pm.GridField(grid, vals, 0.0)
    np.testing.assert_allclose(fld(pts.reshape(-1, 2)), vals.ravel(), atol=1e-12)
    lines = fld.to_csv().splitlines()
    assert lines[0] == "r,theta,u" and len(lines) == 65


def test_monte_carlo_agrees_with_fd(heat):
    u = pm.fd_oracle(heat, pm.PolarGrid(101, 100), 0.5, 1e-3)
    est = pm.estimate_u(heat, [0.6, 0.0], 0.5, 20000, SimConfig(0.5, 1e-3, 0.5, seed=5))
    assert abs(est.mean - float(u(np.array([0.6, 0.0])))) <= 3 * est.stderr + 15 * 1e-3


def test_monte_carlo_with_drift_agrees_with_fd(two_wells):
    g = lambda x: np.asarray(x)[..., 0]
    p = pm.PdeProblem(two_wells, g, 0.6)
    u = pm.fd_oracle(p, pm.PolarGrid(101, 100), 0.3, 1e-3)
    x = np.array([0.3, -0.2])
    est = pm.estimate_u(p, x, 0.3, 20000, SimConfig(0.6, 1e-3, 0.3, seed=8))
    assert abs(est.mean - float(u(x))) <= 3 * est.stderr + 15 * 1e-3


def test_estimate_independent_of_batching(heat):
    sim = SimConfig(0.5, 5e-3, 0.2, seed=2)
    a = pm.estimate_u(heat, [0.1, 0.1], 0.2, 30, sim, batch=7)
    b = pm.estimate_u(heat, [0.1, 0.1], 0.2, 30, sim)
    c = pm.estimate_u(heat, [0.1, 0.1], 0.2, 30, sim, batch=4, workers=2)
    assert a == b == c


def test_estimate_argument_checks(heat):
    with pytest.raises(ValueError):
        pm.estimate_u(heat, [0.0, 0.0], 0.5, 1, SimConfig(0.5))
    with pytest.raises(ValueError):
        pm.estimate_u(heat, [0.0, 0.0], 2.0, 10, SimConfig(0.5, t_max=1.0))


def _two_state_setup(two_wells, two_well_points):
    stable = [e for e in two_well_points if e.stable]
    V = qp.QuasipotentialMatrix.from_pairs([1, 3], {(1, 3): 0.3, (3, 1): 1.0})
    u1 = stable[0].location
    p = pm.PdeProblem(two_wells, lambda x: 0.5 * (1 - np.asarray(x) @ u1), 0.5)
    return p, h.build_cycle_tree(V), stable


def test_long_time_rows_and_report(two_wells, two_well_points):
    p, tree, stable = _two_state_setup(two_wells, two_well_points)
    rows = pm.check_long_time_limit(p, stable[0].location, [0.1], tree, two_well_points,
                                    SimConfig(0.5, 5e-3, 1.0, seed=1), 40)
    (row,) = rows
    assert row.state == 1 and row.target == pytest.approx(0.0, abs=1e-12)
    assert row.t == pytest.approx(math.exp(0.1 / 0.25))
    assert row.gap == abs(row.estimate - row.target)
    text = pm.report_csv(rows).splitlines()
    assert text[0] == ",".join(pm.REPORT_COLUMNS) and len(text) == 2


def test_long_time_budget(two_wells, two_well_points):
    p, tree, stable = _two_state_setup(two_wells, two_well_points)
    with pytest.raises(HorizonInfeasible):
        pm.check_long_time_limit(p, stable[0].location, [3.0], tree, two_well_points,
                                 SimConfig(0.5, 1e-3, 1.0), 100, step_budget=1e6)


def test_basin_indicator():
    g = pm.basin_indicator([1.0, 0.0], 0.25)
    assert g(np.array([1.0, 0.0])) == 1.0
    assert g(np.array([-1.0, 0.0])) < 1e-10
