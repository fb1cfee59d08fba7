from __future__ import annotations

import json

import numpy as np
import pytest
from scipy import stats

from levybsde.levy import (
    InvalidMarkError,
    LevyModel,
    MarkMeasure,
    TimeNet,
    model_net_from_json,
    model_net_to_json,
    resample_window,
    simulate,
)
from levybsde.rng import BLOCK


def within(est, se, target, k=3.0):
    return abs(est - target) <= k * se


@pytest.mark.parametrize(
    "model, atoms, total",
    [
        (LevyModel(0.0, 1.0, ((1.0, 2.0),)), [(0.0, 1.0), (1.0, 2.0)], 3.0),
        (LevyModel(5.0, 0.0, ((-2.0, 0.5),)), [(-2.0, 2.0)], 2.0),
        (LevyModel(0.0, 1.0, ()), [(0.0, 1.0)], 1.0),
    ],
)
def test_mark_measure_examples(model, atoms, total):
    mu = model.mark_measure()
    assert mu.atoms() == atoms
    assert mu.total == pytest.approx(total, abs=1e-15)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"sigma": -1.0},
        {"sigma": 0.0},
        {"jump_atoms": ((0.0, 1.0),)},
        {"jump_atoms": ((1.0, -1.0),)},
        {"jump_atoms": ((1.0, 1.0), (1.0, 2.0))},
        {"horizon": 0.0},
    ],
)
def test_model_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        LevyModel(**kwargs)


def test_mark_measure_index_unknown():
    mu = MarkMeasure((0.0, 1.0), (1.0, 2.0))
    assert mu.index(1.0) == 1
    with pytest.raises(InvalidMarkError):
        mu.index(3.0)


def test_time_net_checks():
    net = TimeNet.equidistant(8, 2.0, 4)
    assert net.coarse_partition == (0.0, 0.5, 1.0, 1.5, 2.0)
    assert net.coarse_interval(2) == (0.5, 1.0)
    with pytest.raises(ValueError):
        TimeNet((0.0, 0.5, 1.0), (0.0, 0.3, 1.0))
    with pytest.raises(ValueError):
        TimeNet.equidistant(4, 1.0, 3)
    with pytest.raises(ValueError):
        net.index(0.3)


def test_json_roundtrip(model3):
    net = TimeNet.equidistant(6, 1.0, 3)
    m2, n2 = model_net_from_json(model_net_to_json(model3, net))
    assert m2 == model3 and n2 == net
    keys = set(json.loads(model_net_to_json(model3, net)))
    assert keys == {"gamma", "sigma", "jump_atoms", "horizon", "points", "coarse_partition"}


@pytest.fixture(scope="module")
def big_bundle():
    model = LevyModel(0.3, 1.0, ((1.0, 1.0), (-0.5, 2.0)), 1.0)
    return simulate(model, TimeNet.equidistant(4, 1.0, 2), 100_000, seed=11)


def test_terminal_moments(big_bundle):
    x_t = big_bundle.x_on_net()[:, -1]
    n = x_t.size
    model = big_bundle.model
    assert within(x_t.mean(), x_t.std() / np.sqrt(n), model.gamma)
    var_target = 1.0 + 1.0 + 0.25 * 2.0
    d2 = (x_t - x_t.mean()) ** 2
    assert within(d2.mean(), d2.std() / np.sqrt(n), var_target)


def test_isometry_and_compensation(big_bundle):
    dm = big_bundle.m_increments()
    n = dm.shape[0]
    masses = big_bundle.marks.mass_array
    for k in range(len(masses)):
        col = dm[:, 1, k]
        assert within(col.mean(), col.std() / np.sqrt(n), 0.0)
        sq = col**2
        assert within(sq.mean(), sq.std() / np.sqrt(n), masses[k] * 0.25)


def test_disjoint_increments_uncorrelated(big_bundle):
    x = big_bundle.x_on_net()
    a, b = x[:, 1] - x[:, 0], x[:, 4] - x[:, 2]
    prod = (a - a.mean()) * (b - b.mean())
    assert within(prod.mean(), prod.std() / np.sqrt(prod.size), 0.0)


def test_thread_count_is_bit_exact(model3):
    net = TimeNet.equidistant(4, 1.0)
    a = simulate(model3, net, 2 * BLOCK + 100, seed=5, threads=1)
    b = simulate(model3, net, 2 * BLOCK + 100, seed=5, threads=8)
    for name in ("dW", "ev_path", "ev_time", "ev_atom", "ev_interval"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_bundle_is_read_only(model12):
    bundle = simulate(model12, TimeNet.equidistant(2), 10, seed=1)
    with pytest.raises(ValueError):
        bundle.dW[0, 0] = 1.0


def test_m_increment_examples(model12):
    net = TimeNet.equidistant(4)
    bundle = simulate(model12, net, 20_000, seed=5)
    assert bundle.m_increment(0, (0.5, 0.5), 1.0) == 0.0
    with pytest.raises(InvalidMarkError):
        bundle.m_increment(0, (0.0, 0.5), 7.0)
    with pytest.raises(ValueError):
        bundle.m_increment(0, (0.5, 0.25), 1.0)
    # the jump mark is exact at off-net times
    vals = np.array([bundle.m_increment(p, (0.1, 0.7), 1.0) for p in range(bundle.n_paths)])
    sq = vals**2
    assert within(sq.mean(), sq.std() / np.sqrt(sq.size), 2.0 * 0.6)
    other = np.array([bundle.m_increment(p, (0.7, 0.9), 1.0) for p in range(bundle.n_paths)])
    prod = (vals - vals.mean()) * (other - other.mean())
    assert within(prod.mean(), prod.std() / np.sqrt(prod.size), 0.0)
    # on net intervals it agrees with the bulk increments
    dm = bundle.m_increments()
    for p in range(5):
        assert bundle.m_increment(p, (0.25, 0.75), 0.0) == pytest.approx(dm[p, 1:3, 0].sum(), abs=1e-12)
        assert bundle.m_increment(p, (0.25, 0.75), 1.0) == pytest.approx(dm[p, 1:3, 1].sum(), abs=1e-12)


def test_brownian_increment_needs_net_points(model12):
    bundle = simulate(model12, TimeNet.equidistant(4), 2, seed=3)
    with pytest.raises(ValueError):
        bundle.m_increment(0, (0.1, 0.5), 0.0)


def test_resample_full_window_is_independent(model12):
    bundle = simulate(model12, TimeNet.equidistant(4), 50_000, seed=21)
    other = resample_window(bundle, 0.0, 1.0, seed2=21)
    a, b = bundle.x_on_net()[:, -1], other.x_on_net()[:, -1]
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) <= 3.0 / np.sqrt(a.size)


def test_resample_coupling(model12):
    net = TimeNet.equidistant(8)
    bundle = simulate(model12, net, 50_000, seed=4)
    t, r = 0.3, 0.6  # 0.3 is not a net point: the straddling interval is split
    other = resample_window(bundle, t, r, seed2=99)
    x, y = bundle.x_on_net(), other.x_on_net()
    assert np.array_equal(x[:, :3], y[:, :3])  # s <= t
    d2 = (x[:, -1] - y[:, -1]) ** 2
    assert within(d2.mean(), d2.std() / np.sqrt(d2.size), 2 * 3.0 * (r - t))
    assert stats.ks_2samp(x[:, -1], y[:, -1]).pvalue > 0.01
    with pytest.raises(ValueError):
        resample_window(bundle, 0.6, 0.6, 1)


def test_replay_is_bit_exact(model3):
    net = TimeNet.equidistant(4)
    bundle = resample_window(simulate(model3, net, 300, seed=8), 0.25, 0.8, seed2=3)
    again = bundle.replay(model3, net, 300, bundle.rng_lineage)
    assert np.array_equal(again.dW, bundle.dW)
    assert np.array_equal(again.ev_time, bundle.ev_time)


def test_csv_export(model12):
    bundle = simulate(model12, TimeNet.equidistant(2), 3, seed=2)
    lines = bundle.to_csv().splitlines()
    assert lines[0] == "path,interval_index,dW,jump_list"
    assert len(lines) == 1 + 3 * 2
