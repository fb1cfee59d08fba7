from __future__ import annotations

import numpy as np
import pytest

from levybsde.bsde import StepTooLargeError, TerminalCondition, batch_standard_errors, make_generator, solve_backward
from levybsde.levy import LevyModel
from levybsde.oracle import (
    TreeModel,
    chaos_project,
    commutation_check,
    exact_bsde,
    exact_conditional_expectation,
    parseval_gap,
)

MODEL = LevyModel(0.1, 1.0, ((1.0, 1.0),), 1.0)
X_T = TerminalCondition.of_x(lambda x: x[:, 0], [1.0], "x")
X_T2 = TerminalCondition.of_x(lambda x: x[:, 0] ** 2, [1.0], "x^2")


@pytest.fixture(scope="module")
def tree():
    return TreeModel.build(MODEL, 4, coarse=[0.0, 0.5, 1.0])


def test_tree_moments(tree):
    tree.check_moments()
    probs = tree.leaf_probs()
    assert probs.sum() == pytest.approx(1.0, abs=1e-14)
    x_t = tree.leaves().x[:, -1]
    assert probs @ x_t == pytest.approx(0.1, abs=1e-14)
    assert probs @ (x_t - 0.1) ** 2 == pytest.approx(2.0, abs=1e-13)


def test_tree_limits():
    with pytest.raises(ValueError):
        TreeModel.build(MODEL, 9)
    with pytest.raises(ValueError):
        TreeModel.build(LevyModel(0.0, 1.0, ((1.0, 1.0), (2.0, 1.0), (3.0, 1.0))), 2)


def test_conditional_expectation_examples(tree):
    v = tree.leaves().x[:, -1].reshape((tree.alphabet,) * tree.n_steps)
    assert np.array_equal(exact_conditional_expectation(tree, v, tree.n_steps), v)
    assert float(exact_conditional_expectation(tree, v, 0)) == pytest.approx(0.1, abs=1e-14)
    with pytest.raises(ValueError):
        exact_conditional_expectation(tree, v, 5)


def test_exact_bsde_examples(tree):
    zero = exact_bsde(tree, make_generator("zero"), X_T)
    assert zero.y0 == pytest.approx(0.1, abs=1e-14)
    shift = exact_bsde(tree, make_generator("constant", c=1.5), X_T)
    for i, t in enumerate(tree.net.points):
        assert np.allclose(shift.y[i], zero.y[i] + 1.5 * (1.0 - t), atol=1e-13)
    # Zbar of X_T: every per-mark Z is 1, Zbar = mu(R)
    assert zero.zbar0 == pytest.approx(2.0, abs=1e-13)
    with pytest.raises(StepTooLargeError):
        exact_bsde(TreeModel.build(MODEL, 1), make_generator("linear", a=-1.0), X_T)


def test_chaos_of_skeleton_x(tree):
    kernel, _ = chaos_project(tree, X_T)
    assert kernel.mean() == pytest.approx(0.1, abs=1e-14)
    assert set(kernel.levels) == {0, 1}
    assert len(kernel.levels[1]) == tree.n_steps * len(tree.marks)
    assert np.allclose(list(kernel.levels[1].values()), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        chaos_project(tree, X_T, max_level=5)


def test_product_of_two_increments_single_coefficient(tree):
    leaves = tree.leaves()
    values = leaves.dm[:, 0, 0] * leaves.dm[:, 2, 1]
    kernel, _ = chaos_project(tree, values)
    assert abs(kernel.mean()) < 1e-14
    assert [n for n in kernel.levels if n > 0] == [2]
    assert list(kernel.levels[2]) == [((1, 0), (3, 1))]


def test_zero_driver_structure_flags(tree):
    sol = exact_bsde(tree, make_generator("zero"), X_T2)
    for i in range(tree.n_steps + 1):
        _, flags = chaos_project(tree, sol.y[i], step=i)
        assert flags == {"vanish": True, "cuboid_constant": True}


def test_commutation_and_parseval(tree):
    v = X_T2.evaluate(tree.leaves())
    assert commutation_check(tree, v)["passed"]
    assert parseval_gap(tree, v) < 1e-12


def test_lsmc_matches_tree():
    tree = TreeModel.build(MODEL, 4)
    gen = make_generator("linear", a=-1.0)
    exact = exact_bsde(tree, gen, X_T2)
    driving = tree.sample(40_000, seed=3)
    sol = solve_backward(MODEL, tree.net, gen, X_T2, driving)
    se = batch_standard_errors(MODEL, tree.net, gen, X_T2, driving)
    assert abs(sol.y0 - exact.y0) <= 3 * se["y0_se"]
    assert abs(sol.zbar0 - exact.zbar0) <= 3 * se["zbar0_se"]


def test_tree_sample_deterministic(tree):
    a = tree.sample(100, seed=1)
    b = tree.sample(100, seed=1)
    assert np.array_equal(a.x, b.x)
