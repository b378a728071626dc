import math

import numpy as np
import pytest

from rws.baseline import (nml_batch_average, nml_full, nw_batch_average, nw_full,
                          spline_batch_average, spline_full)
from rws.data import Batch, PooledDataset
from rws.estfun import GammaShapeScore, MeanRegression
from rws.kernel import EPANECHNIKOV, GAUSSIAN
from rws.renew import EvaluationGrid, RenewableState, update_closed_form
from rws.spline import SplineBasis, SplineState, predict, solve_spline, update_spline


def nw_loop(xs, ys, h, x):
    w = [math.exp(-0.5 * ((xi - x) / h) ** 2) for xi in xs]
    return sum(wi * yi for wi, yi in zip(w, ys)) / sum(w)


@pytest.fixture
def data():
    rng = np.random.default_rng(0)
    xs = rng.uniform(-1, 1, 120)
    return PooledDataset(xs, np.sin(2 * xs) + 0.2 * rng.normal(size=120))


@pytest.fixture
def grid():
    return EvaluationGrid.uniform(-1, 1, 21)


def test_nw_matches_loop(data, grid):
    est = nw_full(data, 0.2, GAUSSIAN, grid)
    expect = [nw_loop(data.xs, data.ys, 0.2, x) for x in grid.points]
    np.testing.assert_allclose(est.values[:, 0], expect, rtol=1e-12)
    assert est.defined.all()


def test_nml_mean_equals_nw(data, grid):
    a = nw_full(data, 0.2, GAUSSIAN, grid)
    b = nml_full(data, 0.2, GAUSSIAN, MeanRegression(), grid)
    np.testing.assert_allclose(b.values, a.values, rtol=1e-10)


def test_renewable_on_pooled_data_equals_nw(data, grid):
    s = RenewableState.fresh(grid)
    for lo in range(0, 120, 40):
        s = update_closed_form(s, Batch(data.xs[lo:lo + 40], data.ys[lo:lo + 40]), 0.2)
    full = nw_full(data, 0.2, GAUSSIAN, grid)
    np.testing.assert_allclose(s.estimate, full.values, rtol=1e-12)


def test_nw_batch_average_is_mean_of_curves(data, grid):
    batches = [Batch(data.xs[lo:lo + 40], data.ys[lo:lo + 40]) for lo in range(0, 120, 40)]
    hs = [0.2, 0.3, 0.25]
    avg = nw_batch_average(batches, hs, GAUSSIAN, grid)
    curves = [[nw_loop(b.xs, b.ys, h, x) for x in grid.points] for b, h in zip(batches, hs)]
    np.testing.assert_allclose(avg.values[:, 0], np.mean(curves, axis=0), rtol=1e-12)
    assert (avg.counts == 3).all()


def test_batch_average_skips_undefined_batches():
    grid = EvaluationGrid.uniform(0, 10, 11, trim=0.0)
    left = Batch([0.0, 0.5, 1.0], [1.0, 1.0, 1.0])
    right = Batch([9.0, 9.5, 10.0], [3.0, 3.0, 3.0])
    avg = nw_batch_average([left, right], [0.5, 0.5], EPANECHNIKOV, grid)
    assert avg.values[0, 0] == 1.0 and avg.values[-1, 0] == 3.0
    assert avg.counts[0] == 1 and not avg.defined[5]


def test_batch_average_length_mismatch(data, grid):
    with pytest.raises(ValueError):
        nw_batch_average([Batch(data.xs, data.ys)], [0.1, 0.2], GAUSSIAN, grid)


def test_nml_gamma_solves_local_score():
    from scipy.special import digamma
    from scipy.optimize import brentq
    rng = np.random.default_rng(1)
    xs = rng.uniform(-1, 1, 400)
    ys = rng.gamma(3.0, size=400)
    grid = EvaluationGrid(np.array([-0.5, 0.5]), (-1, 1))
    est = nml_full(PooledDataset(xs, ys), 0.4, GAUSSIAN, GammaShapeScore(), grid)
    for gi, x in enumerate(grid.points):
        w = np.exp(-0.5 * ((xs - x) / 0.4) ** 2)
        root = brentq(lambda a: np.sum(w * (np.log(ys) - digamma(a))), 0.05, 50, xtol=1e-14)
        assert est.values[gi, 0] == pytest.approx(root, abs=1e-8)


def test_nml_batch_average(data, grid):
    batches = [Batch(data.xs[:60], data.ys[:60]), Batch(data.xs[60:], data.ys[60:])]
    a = nml_batch_average(batches, [0.3, 0.3], GAUSSIAN, MeanRegression(), grid)
    b = nw_batch_average(batches, [0.3, 0.3], GAUSSIAN, grid)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-10)


def test_spline_full_equals_renewable(data):
    basis = SplineBasis.equidistant(-1, 1, 5)
    s = SplineState.fresh(basis)
    for lo in range(0, 120, 30):
        s = update_spline(s, Batch(data.xs[lo:lo + 30], data.ys[lo:lo + 30]))
    # the coefficients are ill-conditioned, so compare fitted curves
    pts = np.linspace(-1, 1, 41)
    np.testing.assert_allclose(predict(basis, solve_spline(s), pts),
                               predict(basis, spline_full(data, basis), pts), rtol=1e-9, atol=1e-9)


def test_spline_batch_average_underdetermined_batches():
    grid = EvaluationGrid.uniform(-1, 1, 11)
    basis = SplineBasis.equidistant(-1, 1, 6)
    batches = [Batch([-0.5, 0.0, 0.5], [1.0, 1.0, 1.0]), Batch([-0.2, 0.2, 0.4], [1.0, 1.0, 1.0])]
    avg = spline_batch_average(batches, basis, grid)
    assert np.all(np.isfinite(avg.values))
    assert avg.defined.all()
