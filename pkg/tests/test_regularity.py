from __future__ import annotations

import io

import numpy as np
import pytest

from levybsde.bsde import TerminalCondition, make_generator, solve_backward
from levybsde.chaos import ChaosKernelSet, projection_distance_sq
from levybsde.levy import LevyModel, TimeNet, simulate
from levybsde.regularity import (
    Curve,
    condition_i,
    condition_ii,
    condition_iii,
    condition_iv,
    coupling_identity,
    curves_csv,
    default_grids,
    discretization_error,
    error_table_csv,
    fit_theta,
    rate_shape,
    regularity_report,
    suffcond_experiment,
)

MODEL = LevyModel(0.0, 1.0, ((1.0, 2.0),), 1.0)
X_T = TerminalCondition.of_x(lambda x: x[:, 0], [1.0], "x")


def synthetic(condition, theta, n=16, r_k=1.0, c=2.0):
    s = np.linspace(0.0, r_k, n + 1)[:-1]
    t = s.copy()
    if condition in ("ii", "iv"):
        t = s[1:]
        s = np.zeros_like(t)
    v = c * rate_shape(condition, theta, s, t, r_k)
    return Curve(condition, 1, r_k, s, t, v, np.zeros_like(v))


@pytest.mark.parametrize("condition", ["i", "ii", "iii", "iv"])
@pytest.mark.parametrize("theta", [0.3, 0.5, 0.9])
def test_fit_recovers_synthetic_exponent(condition, theta):
    fit = fit_theta(synthetic(condition, theta))
    assert fit.theta == pytest.approx(theta, abs=1e-3)
    assert fit.ci[0] <= fit.theta <= fit.ci[1]
    assert fit.r2 == pytest.approx(1.0, abs=1e-6)


def test_fit_calibration_under_noise():
    rng = np.random.default_rng(0)
    base = synthetic("i", 0.5)
    hits = 0
    for _ in range(100):
        noisy = Curve("i", 1, 1.0, base.s, base.t, base.value * (1 + 0.05 * rng.standard_normal(base.value.size)), base.se)
        hits += abs(fit_theta(noisy).theta - 0.5) <= 0.1
    assert hits >= 95


def test_fit_errors():
    c = synthetic("i", 0.5)
    with pytest.raises(ValueError, match="at least 5"):
        fit_theta(Curve("i", 1, 1.0, c.s[:4], c.t[:4], c.value[:4], c.se[:4]))
    bad = c.value.copy()
    bad[3] = 0.0
    with pytest.raises(ValueError, match="positive"):
        fit_theta(Curve("i", 1, 1.0, c.s, c.t, bad, c.se))
    with pytest.raises(ValueError, match="unknown condition"):
        rate_shape("v", 0.5, c.s, c.t, 1.0)


@pytest.fixture(scope="module")
def x_solution():
    net = TimeNet.equidistant(16)
    driving = simulate(MODEL, net, 20_000, seed=51).driving()
    return solve_backward(MODEL, net, make_generator("zero"), X_T, driving)


def test_condition_i_x_terminal(x_solution):
    g = default_grids(x_solution.net, 1)
    cur = condition_i(x_solution, 1, g["s_i"] + [1.0])
    assert cur.value[-1] == 0.0
    target = 3.0 * (1.0 - cur.s[:-1])
    assert np.all(np.abs(cur.value[:-1] - target) <= 3 * cur.se[:-1])
    assert fit_theta(cur.positive()).theta == pytest.approx(1.0, abs=0.1)
    with pytest.raises(ValueError, match="outside"):
        condition_i(x_solution, 1, [1.5])


def test_conditions_ii_iv_vanish_on_diagonal(x_solution):
    assert condition_ii(x_solution, 1, [(0.5, 0.5)]).value[0] == 0.0
    assert condition_iv(x_solution, 1, [(0.5, 0.5)], [1.0, 1.0]).value[0] == 0.0
    with pytest.raises(ValueError, match="zero"):
        condition_iv(x_solution, 1, [(0.0, 0.5)], [0.0, 0.0])
    with pytest.raises(ValueError):
        condition_ii(x_solution, 1, [(0.5, 0.25)])


def test_condition_iii_constant_for_x(x_solution):
    cur = condition_iii(x_solution, 1, default_grids(x_solution.net, 1)["s_iii"])
    # Z = 1 on both atoms: int Z^2 dmu = mu(R) = 3 (plus regression noise)
    assert np.all(np.abs(cur.value - 3.0) < 0.05 * 3.0)
    with pytest.raises(ValueError):
        condition_iii(x_solution, 1, [1.0])


def test_regularity_report_and_csv(x_solution):
    rep = regularity_report(x_solution)
    for cond in ("i", "ii", "iii"):
        assert rep.fits[(cond, 1)].theta == pytest.approx(1.0, abs=0.1)
    head = io.StringIO(curves_csv(rep.curves)).readline().strip()
    assert head == "condition,k,s,t,estimate,SE"


def test_condition_i_against_chaos_kernel():
    net = TimeNet.equidistant(8, 1.0, 2)
    mu = MODEL.mark_measure()
    # level-2 cells with distinct coordinates so pathwise evaluation is exact
    xi_k = ChaosKernelSet(net.coarse_partition, mu, {
        0: {(): 0.5}, 1: {((1, 0),): 1.0, ((2, 1),): -0.5},
        2: {((1, 0), (2, 1)): 0.75, ((1, 1), (2, 0)): 0.4},
    })
    xi = TerminalCondition(kernel=xi_k)
    driving = simulate(MODEL, net, 40_000, seed=52).driving()
    sol = solve_backward(MODEL, net, make_generator("zero"), xi, driving)
    grid = [0.5, 0.625, 0.75, 0.875]
    cur = condition_i(sol, 2, grid)
    exact = np.array([projection_distance_sq(xi_k, s, 1.0) for s in grid])
    assert np.all(np.abs(cur.value - exact) <= 3 * cur.se)


def test_suffcond_and_coupling_identity():
    model = LevyModel(0.1, 1.0, ((1.0, 1.0),), 1.0)
    net = TimeNet.equidistant(16, 1.0, 2)
    bundle = simulate(model, net, 20_000, seed=53)
    gen = make_generator("zero")
    grid = [p for p in net.points if p < 0.5]
    res = suffcond_experiment(model, net, gen, TerminalCondition.of_x(lambda x: x[:, 0], [0.5]), bundle, 1, grid,
                              seed2=54)
    assert res.theta_xi.theta == pytest.approx(1.0, abs=0.1)
    assert res.theta_y.theta == pytest.approx(1.0, abs=0.1)
    assert res.passed
    call = TerminalCondition.of_x(lambda x: np.maximum(x[:, 0], 0.0), [0.5])
    sol = solve_backward(model, net, gen, call, bundle, store_z=False)
    rows = coupling_identity(sol, bundle, 1, grid, 54, gen)
    assert max(r["gap_in_se"] for r in rows) <= 3.0


def test_discretization_error_examples():
    call = TerminalCondition.of_x(lambda x: np.maximum(x[:, 0], 0.0), [1.0])
    res = discretization_error(MODEL, make_generator("zero"), call, [8], 8, 2000, seed=1, ref_factor=1)
    assert res["rows"][0].err_tau == 0.0
    assert error_table_csv(res).splitlines()[0] == "n,mesh,err_tau,err_y,err_z,var_2,z_floor"
    with pytest.raises(ValueError, match="not nested"):
        discretization_error(MODEL, make_generator("zero"), call, [3], 8, 100, seed=1)
