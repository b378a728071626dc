import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln
from scipy.special import digamma as ref_digamma

from rws.data import Batch
from rws.errors import InvalidBatchError
from rws.estfun import EstimatingFunction, GammaShapeScore, MeanRegression, MeanVariance
from rws.kernel import EPANECHNIKOV, GAUSSIAN
from rws.renew import (EvaluationGrid, RenewableState, evaluate, update_closed_form,
                       update_newton)


def gauss(u):
    return math.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)


def pooled_formula(batches, hs, x):
    """Direct double sum of the per-batch-bandwidth pooled estimator."""
    num = den = 0.0
    for b, h in zip(batches, hs):
        for xi, yi in zip(b.xs, b.ys):
            w = gauss((xi - x) / h) / h
            num += yi * w
            den += w
    return num / den


def random_batches(rng, k, size, lo=-1.0, hi=1.0):
    return [Batch(rng.uniform(lo, hi, size), rng.normal(size=size), index=i + 1) for i in range(k)]


@pytest.fixture
def grid():
    return EvaluationGrid.uniform(-1.0, 1.0, 41)


class TestGrid:
    def test_validation(self):
        with pytest.raises(ValueError):
            EvaluationGrid(np.array([0.0, 0.0]), (-1, 1))
        with pytest.raises(ValueError):
            EvaluationGrid(np.array([0.0, 2.0]), (-1, 1))
        with pytest.raises(ValueError):
            EvaluationGrid.uniform(0, 1, 11, trim=0.5)

    def test_interior(self):
        g = EvaluationGrid.uniform(0, 10, 11, trim=0.1)
        assert g.interior == (1.0, 9.0)
        assert g.interior_mask.sum() == 9


def test_fresh_state(grid):
    s = RenewableState.fresh(grid, 2)
    assert s.batch_count == 0 and s.cumulative_n == 0
    assert not s.jsum.any() and not s.estimate.any() and not s.defined_mask.any()


def test_single_point_batch():
    g = EvaluationGrid(np.array([-1.0, 0.0, 1.0]), (-1, 1))
    s = update_closed_form(RenewableState.fresh(g), Batch([0.0], [5.0]), 0.3)
    assert s.estimate[1, 0] == 5.0


def test_constant_fixed_point(grid):
    rng = np.random.default_rng(0)
    s = RenewableState.fresh(grid)
    for _ in range(3):
        s = update_closed_form(s, Batch(rng.uniform(-1, 1, 20), np.full(20, 2.5)), 0.2)
    np.testing.assert_allclose(s.estimate[s.defined_mask, 0], 2.5, rtol=1e-14)


def test_two_batches_match_pooled_double_sum(grid):
    rng = np.random.default_rng(1)
    batches = random_batches(rng, 2, 5)
    s = RenewableState.fresh(grid)
    for b in batches:
        s = update_closed_form(s, b, 0.4)
    expect = [pooled_formula(batches, [0.4, 0.4], x) for x in grid.points]
    np.testing.assert_allclose(s.estimate[:, 0], expect, rtol=1e-12)


def test_differing_bandwidths_match_pooled_form(grid):
    rng = np.random.default_rng(2)
    batches = random_batches(rng, 4, 12)
    hs = [0.5, 0.35, 0.3, 0.2]
    s = RenewableState.fresh(grid)
    for b, h in zip(batches, hs):
        s = update_closed_form(s, b, h)
    expect = [pooled_formula(batches, hs, x) for x in grid.points]
    np.testing.assert_allclose(s.estimate[:, 0], expect, rtol=1e-10)


def test_newton_mean_regression_matches_closed_form(grid):
    rng = np.random.default_rng(3)
    a = b = RenewableState.fresh(grid)
    for batch in random_batches(rng, 5, 15):
        a = update_closed_form(a, batch, 0.25)
        b = update_newton(b, batch, 0.25, f=MeanRegression())
    np.testing.assert_allclose(b.estimate, a.estimate, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b.jsum, a.jsum, rtol=1e-12)


def bisect(fn, lo, hi, tol=1e-14):
    flo = fn(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def test_gamma_shape_recovered():
    rng = np.random.default_rng(4)
    n = 10_000
    xs = rng.uniform(-1, 1, n)
    ys = rng.gamma(2.0, size=n)
    g = EvaluationGrid(np.array([-0.5, 0.0, 0.5]), (-1, 1))
    h = 5.0
    s = update_newton(RenewableState.fresh(g), Batch(xs, ys), h, f=GammaShapeScore())
    w = np.exp(-0.5 * (xs / h) ** 2)
    logy = np.log(ys)
    root = bisect(lambda a: np.sum(w * (logy - ref_digamma(a))), 0.1, 20.0)
    se = 1.0 / math.sqrt(n * 0.6449340668482264)  # trigamma(2)
    assert abs(s.estimate[1, 0] - 2.0) <= 4 * se
    assert s.estimate[1, 0] == pytest.approx(root, abs=1e-8)


def brute_meanvar_root(jprev, aprev, s0, s1, s2):
    """Damped Jacobi fixed-point iteration on the two-equation system."""
    r, v = aprev
    d1 = jprev[0, 0] + s0
    d2 = jprev[1, 1] + s0
    for _ in range(2000):
        f1 = jprev[0, 0] * (r - aprev[0]) - (s1 - r * s0)
        f2 = (jprev[1, 0] * (r - aprev[0]) + jprev[1, 1] * (v - aprev[1])
              - (s2 - 2 * r * s1 + r * r * s0 - v * s0))
        r, v = r - 0.5 * f1 / d1, v - 0.5 * f2 / d2
    return np.array([r, v])


def test_mean_variance_two_batches_match_fixed_point_solver():
    rng = np.random.default_rng(5)
    g = EvaluationGrid.uniform(-1, 1, 9)
    b1, b2 = [Batch(rng.uniform(-1, 1, 80), rng.normal(1, 2, 80)) for _ in range(2)]
    f = MeanVariance()
    h = 0.3
    s1 = update_newton(RenewableState.fresh(g, 2), b1, h, f=f)
    s2 = update_newton(s1, b2, h, f=f)
    for gi, x in enumerate(g.points):
        w = np.array([gauss((xi - x) / h) / h for xi in b2.xs])
        expect = brute_meanvar_root(s1.jsum[gi], s1.estimate[gi], w.sum(), w @ b2.ys, w @ b2.ys ** 2)
        np.testing.assert_allclose(s2.estimate[gi], expect, rtol=1e-8, atol=1e-8)


def neg_loglik(name, a, y):
    if name == "mean":
        return 0.5 * (y - a) ** 2
    return gammaln(a) - (a - 1) * np.log(y) + y


@pytest.mark.parametrize("f", [MeanRegression(), GammaShapeScore()])
def test_residual_certificate_and_stationarity(f):
    rng = np.random.default_rng(6)
    g = EvaluationGrid.uniform(-1, 1, 11)
    h = 0.35
    s = RenewableState.fresh(g)
    batches = [Batch(rng.uniform(-1, 1, 50), rng.gamma(3.0, size=50)) for _ in range(3)]
    for b in batches[:2]:
        s = update_newton(s, b, h, f=f)
    prev = s
    s = update_newton(prev, batches[2], h, f=f)
    b = batches[2]
    for gi, x in enumerate(g.points):
        w = np.array([gauss((xi - x) / h) / h for xi in b.xs])
        a = s.estimate[gi, 0]
        jp, ap = prev.jsum[gi, 0, 0], prev.estimate[gi, 0]
        usum = float(np.sum(w * f.u(np.array([[a]]), b.ys[None, :], 0.0)[0, :, 0]))
        assert abs(jp * (a - ap) - usum) <= 10 * 1e-8

        def objective(t):
            return 0.5 * jp * (t - ap) ** 2 + np.sum(w * neg_loglik(f.name, t, b.ys))
        step = 1e-5 * max(1.0, abs(a))
        grad = (objective(a + step) - objective(a - step)) / (2 * step)
        assert abs(grad) <= 1e-5 * max(1.0, jp + w.sum())


def test_weights_grow_monotonically(grid):
    rng = np.random.default_rng(7)
    f = MeanVariance()
    s = RenewableState.fresh(grid, 2)
    for b in random_batches(rng, 4, 30):
        new = update_newton(s, b, 0.3, f=f)
        assert np.all(new.jsum[:, 0, 0] >= s.jsum[:, 0, 0])
        assert np.all(new.jsum[:, 1, 1] >= s.jsum[:, 1, 1])
        s = new
    assert s.cumulative_n == 120 and s.batch_count == 4


def test_undefined_points_far_from_data():
    g = EvaluationGrid.uniform(-1, 1, 21)
    s = update_closed_form(RenewableState.fresh(g), Batch([-0.95, -0.9], [1.0, 2.0]), 0.2, EPANECHNIKOV)
    assert s.defined_mask[0] and not s.defined_mask[-1]
    assert evaluate(s, 0.9) is None


def test_evaluate_interpolates():
    g = EvaluationGrid(np.array([0.0, 1.0, 2.0]), (0, 2))
    s = RenewableState.fresh(g)
    s.estimate[:, 0] = [1.0, 3.0, 7.0]
    s.defined_mask[:] = True
    assert evaluate(s, 1.0)[0] == 3.0
    assert evaluate(s, 1.5)[0] == 5.0
    assert evaluate(s, 2.5) is None
    assert evaluate(RenewableState.fresh(g), 1.0) is None


def test_empty_batch_rejected():
    with pytest.raises(InvalidBatchError):
        Batch([], [])


def test_dimension_mismatch(grid):
    with pytest.raises(ValueError):
        update_newton(RenewableState.fresh(grid, 1), Batch([0.0], [1.0]), 0.2, f=MeanVariance())


def test_nonconvergence_is_reported(grid, caplog):
    # U is constant, so the first-batch equation has no root
    f = EstimatingFunction(
        1,
        u=lambda a, y, x: np.ones(np.broadcast_shapes(a.shape[:-1], np.shape(y)) + (1,)),
        j=lambda a, y, x: np.ones(np.broadcast_shapes(a.shape[:-1], np.shape(y)) + (1, 1)),
    )
    with caplog.at_level(logging.WARNING):
        s = update_newton(RenewableState.fresh(grid), Batch([0.0, 0.1], [1.0, 2.0]), 0.3, f=f)
    assert s.nonconverged == grid.size
    assert not s.defined_mask.any()
    assert "did not converge" in caplog.text or "failed to converge" in caplog.text


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=10, unique=True))
def test_pointwise_independence(idx):
    """Estimates at a grid point do not depend on which other points are carried."""
    rng = np.random.default_rng(8)
    full = EvaluationGrid.uniform(-1, 1, 41)
    sub = EvaluationGrid(full.points[sorted(idx)], (-1, 1), trim=0.0)
    a, b = RenewableState.fresh(full), RenewableState.fresh(sub)
    for batch in random_batches(rng, 3, 20):
        a = update_closed_form(a, batch, 0.3)
        b = update_closed_form(b, batch, 0.3)
    np.testing.assert_allclose(b.estimate[:, 0], a.estimate[sorted(idx), 0], rtol=1e-13, atol=1e-15)
