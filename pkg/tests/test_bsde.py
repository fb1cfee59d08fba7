from __future__ import annotations

import math

import numpy as np
import pytest

from levybsde.bsde import (
    Generator,
    StepTooLargeError,
    TerminalCondition,
    batch_standard_errors,
    make_generator,
    picard_solve,
    solve_backward,
    stability_gap,
    zbar_estimator,
)
from levybsde.levy import LevyModel, TimeNet, simulate
from levybsde.regression import RegressionSpec, projector

X_T = TerminalCondition.of_x(lambda x: x[:, 0], [1.0], "x")
ONE = TerminalCondition.of_x(lambda x: np.ones(x.shape[0]), [1.0], "one")


@pytest.fixture(scope="module")
def setting():
    model = LevyModel(0.0, 1.0, ((1.0, 2.0),), 1.0)
    net = TimeNet.equidistant(4)
    bundle = simulate(model, net, 20_000, seed=31)
    return model, net, bundle.driving()


def test_zero_driver_martingale(setting):
    model, net, driving = setting
    sol = solve_backward(model, net, make_generator("zero"), X_T, driving)
    assert abs(sol.y0) <= 3 * sol.diagnostics["y_se"]
    # Z_{t,x} = 1 on every atom, so Zbar = int kappa' dmu = mu(R) = 3
    masses = driving.marks.mass_array
    dx = np.diff(driving.x, axis=1)
    n = driving.n_paths
    for i in range(net.n_intervals):
        target = dx[:, i, None] * driving.dm[:, i, :] / (masses * net.dt[i])
        se = target.std(axis=0) / math.sqrt(n)
        assert np.all(np.abs(sol.z[:, i, :].mean(axis=0) - 1.0) <= 3 * se)
    assert abs(sol.zbar0 - 3.0) <= 3 * sol.diagnostics["zbar_se"]


def test_constant_driver_shift(setting):
    model, net, driving = setting
    base = solve_backward(model, net, make_generator("zero"), X_T, driving)
    shifted = solve_backward(model, net, make_generator("constant", c=1.5), X_T, driving)
    tau = 1.0 - net.array
    assert np.allclose(shifted.y - base.y, 1.5 * tau[None, :], atol=1e-10)


def test_linear_driver_deterministic_terminal(setting):
    model, net, driving = setting
    sol = solve_backward(model, net, make_generator("linear", a=-1.0), ONE, driving)
    steps = np.arange(net.n_intervals, -1, -1)
    implicit = (1 + 0.25) ** (-steps.astype(float))
    assert np.allclose(sol.y, implicit[None, :], atol=1e-12)
    assert abs(sol.y0 - math.exp(-1.0)) < 0.25 / 2  # first-order scheme error


def test_step_too_large(setting):
    model, _, _ = setting
    net = TimeNet.equidistant(1)
    driving = simulate(model, net, 100, seed=1).driving()
    with pytest.raises(StepTooLargeError, match="finer net"):
        solve_backward(model, net, make_generator("linear", a=-2.0), X_T, driving)


def test_bundle_must_match(setting):
    model, _, driving = setting
    with pytest.raises(ValueError):
        solve_backward(model, TimeNet.equidistant(8), make_generator("zero"), X_T, driving)


def test_generator_lipschitz_validation():
    bad = Generator(lambda t, x, y, z: 2 * y, 1.0, name="bad")
    with pytest.raises(ValueError, match="violates"):
        bad.validate(np.random.default_rng(0))
    ok = make_generator("sine", a=0.5, b=0.5)
    assert ok.validate(np.random.default_rng(0)) <= 1.0
    with pytest.raises(ValueError):
        make_generator("cubic")


def test_zbar_estimator_examples(setting):
    _, _, driving = setting
    kappa = np.ones(2)
    n = driving.n_paths
    i1 = driving.dm[:, 1:3, :].sum(axis=1) @ kappa
    est = zbar_estimator(driving, i1, 0.25, 0.75, kappa)
    assert abs(est.mean() - 3.0) <= 3 * est.std() / math.sqrt(n)
    for eta in (driving.x[:, 1], driving.x[:, 4] - driving.x[:, 3]):
        est = zbar_estimator(driving, eta, 0.25, 0.75, kappa)
        assert abs(est.mean()) <= 3 * est.std() / math.sqrt(n)
    with pytest.raises(ValueError):
        zbar_estimator(driving, i1, 0.5, 0.5, kappa)


def test_picard_first_iterate_is_projection(setting):
    model, net, driving = setting
    spec = RegressionSpec()
    it = picard_solve(model, net, make_generator("zero"), X_T, driving, 1, spec)[0]
    xi = X_T.evaluate(driving)
    for i in range(net.n_intervals):
        proj = projector(X_T.state(driving, i), spec)
        assert np.allclose(it.y[:, i], proj(xi), atol=1e-10)


def test_picard_converges_to_backward_solution(setting):
    model, net, driving = setting
    gen = make_generator("linear", a=-1.0)
    call = TerminalCondition.of_x(lambda x: np.maximum(x[:, 0], 0.0), [1.0], "call")
    target = solve_backward(model, net, gen, call, driving).y0
    its = picard_solve(model, net, gen, call, driving, 6)
    gaps = [abs(s.y0 - target) for s in its]
    assert gaps[-1] < gaps[0] and gaps[-1] < 0.05


def test_stability_gap_examples(setting):
    model, net, driving = setting
    gen = make_generator("zero")
    sol = solve_backward(model, net, gen, X_T, driving)
    xi = X_T.evaluate(driving)
    same = stability_gap(sol, sol, xi, xi, gen, gen)
    assert same["lhs"] == 0.0
    ratios = []
    for eps in (1e-1, 1e-2):
        pert = TerminalCondition.of_x(lambda x, e=eps: x[:, 0] + e, [1.0])
        sol2 = solve_backward(model, net, gen, pert, driving)
        ratios.append(stability_gap(sol, sol2, xi, pert.evaluate(driving), gen, gen)["lhs"] / eps**2)
    assert 0.5 <= ratios[0] / ratios[1] <= 2.0
    ratios = []
    for eps in (1e-1, 1e-2):
        gen2 = make_generator("constant", c=eps)
        sol2 = solve_backward(model, net, gen2, X_T, driving)
        ratios.append(stability_gap(sol, sol2, xi, xi, gen, gen2)["lhs"] / eps**2)
    assert 0.5 <= ratios[0] / ratios[1] <= 2.0
    other = solve_backward(model, TimeNet.equidistant(2), gen, X_T, driving.coarsen(TimeNet.equidistant(2)))
    with pytest.raises(ValueError):
        stability_gap(sol, other, xi, xi, gen, gen)


def test_batch_standard_errors(setting):
    model, net, driving = setting
    se = batch_standard_errors(model, net, make_generator("zero"), X_T, driving, n_batches=10)
    assert se["n_batches"] == 10 and se["y0_se"] > 0 and se["zbar0_se"] > 0
    with pytest.raises(ValueError):
        batch_standard_errors(model, net, make_generator("zero"), X_T, driving, n_batches=1)


def test_kernel_terminal_condition(setting):
    from levybsde.chaos import x_at

    model, net, driving = setting
    xi = TerminalCondition(kernel=x_at(net.coarse_partition, model.mark_measure(), 1))
    assert np.allclose(xi.evaluate(driving), driving.x[:, -1], atol=1e-12)
    with pytest.raises(ValueError):
        TerminalCondition()


def test_solution_csv(setting):
    model, net, driving = setting
    sol = solve_backward(model, net, make_generator("zero"), X_T, driving)
    lines = sol.to_csv(max_paths=2).splitlines()
    assert lines[0] == "path,time,Y,Zbar"
    assert len(lines) == 1 + 2 * 5 and lines[5].endswith(",")
