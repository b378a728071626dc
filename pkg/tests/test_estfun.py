import numpy as np
import pytest

from rws.errors import DomainError
from rws.estfun import (EstimatingFunction, GammaShapeScore, MeanRegression, MeanVariance,
                        eval_j, eval_u, get_estfun)
from rws.kernel import GAUSSIAN, kernel_matrix


def test_mean_regression_values():
    f = MeanRegression()
    assert eval_u(f, [1.5], 4.0).tolist() == [2.5]
    assert eval_j(f, [1.5], 4.0).tolist() == [[1.0]]


def test_mean_variance_values():
    f = MeanVariance()
    u = eval_u(f, [1.0, 0.5], 3.0)
    j = eval_j(f, [1.0, 0.5], 3.0)
    np.testing.assert_array_equal(u, [2.0, 3.5])
    np.testing.assert_array_equal(j, [[1.0, 0.0], [4.0, 1.0]])


def test_gamma_domain():
    f = GammaShapeScore()
    with pytest.raises(DomainError):
        eval_u(f, [0.0], 1.0)
    with pytest.raises(DomainError):
        eval_u(f, [1.0], -1.0)
    assert not f.in_domain(np.array([[-0.1]]))[0]


def test_unknown_name():
    with pytest.raises(ValueError):
        get_estfun("probit")


def test_wrong_parameter_length():
    with pytest.raises(ValueError):
        eval_u(MeanVariance(), [1.0], 2.0)


def generic_twin(f):
    """Same U and J, but through the generic per-observation summation path."""
    return EstimatingFunction(f.dim, u=f.u, j=f.j, name="twin", domain=lambda a: f.in_domain(a))


@pytest.mark.parametrize("f, alpha", [
    (MeanRegression(), [[0.3], [-1.0]]),
    (MeanVariance(), [[0.3, 0.8], [-1.0, 2.0]]),
    (GammaShapeScore(), [[0.7], [2.5]]),
])
def test_moment_shortcut_matches_generic_sums(f, alpha):
    rng = np.random.default_rng(3)
    xs = rng.uniform(-1, 1, 60)
    ys = rng.gamma(2.0, size=60)
    w = kernel_matrix(GAUSSIAN, np.array([-0.2, 0.4]), xs, 0.3)
    alpha = np.array(alpha, dtype=float)
    twin = generic_twin(f)
    u1, j1 = f.weighted_sums(alpha, f.batch_stats(ys, xs, w), np.arange(2))
    u2, j2 = twin.weighted_sums(alpha, twin.batch_stats(ys, xs, w), np.arange(2))
    np.testing.assert_allclose(u1, u2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(j1, j2, rtol=1e-12, atol=1e-12)


def test_merge_stats_equals_single_pass():
    f = MeanVariance()
    rng = np.random.default_rng(4)
    xs, ys = rng.uniform(-1, 1, 40), rng.normal(size=40)
    pts = np.linspace(-1, 1, 5)
    whole = f.batch_stats(ys, xs, kernel_matrix(GAUSSIAN, pts, xs, 0.2))
    a = f.batch_stats(ys[:15], xs[:15], kernel_matrix(GAUSSIAN, pts, xs[:15], 0.2))
    b = f.batch_stats(ys[15:], xs[15:], kernel_matrix(GAUSSIAN, pts, xs[15:], 0.2))
    np.testing.assert_allclose(f.merge_stats(a, b), whole, rtol=1e-13)


def test_custom_function_finite_difference_jacobian():
    f = EstimatingFunction(1, u=lambda a, y, x: (np.sin(y) - a[..., 0] ** 3)[..., None])
    j = eval_j(f, [0.7], 0.3)
    assert j[0, 0] == pytest.approx(3 * 0.7 ** 2, rel=1e-8)


def test_gamma_warm_start_is_local_mean_with_fallback():
    f = GammaShapeScore()
    xs = np.array([-0.1, 0.0, 0.1, 5.0])
    ys = np.array([1.0, 2.0, 3.0, 40.0])
    start = f.warm_start(xs, ys, np.array([0.0, 100.0]), h=0.1)
    assert start[:, 0].tolist() == [2.0, 1.0]
