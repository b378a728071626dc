"""Reference estimators computed from retained data.

Full-data estimators see the pooled stream; batch-average estimators fit each
batch separately and average the per-batch curves on the grid.
"""

import logging

import numpy as np

from .estfun import MeanRegression
from .kernel import DEGENERACY_THRESHOLD
from .renew import GridEstimate, kernel_stats, newton_solve, nondegenerate
from .spline import basis_eval, normal_equations, solve_normal_equations

log = logging.getLogger(__name__)


def nw_full(data, h, k, grid, threshold=DEGENERACY_THRESHOLD):
    """Nadaraya-Watson estimate at every grid point."""
    stats, _ = kernel_stats(MeanRegression(), k, grid.points, data.xs, data.ys, h)
    s0, sy = stats[:, 0], stats[:, 1]
    defined = s0 > threshold
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(s0 > 0, sy / s0, 0.0)
    return GridEstimate(grid, vals[:, None], defined)


def nml_full(data, h, k, f, grid, tol=1e-8, max_iter=50, threshold=DEGENERACY_THRESHOLD):
    """Root of the full-data local estimating equation ``sum_i U(a; Y_i) K_h(X_i - x) = 0``."""
    stats, s0 = kernel_stats(f, k, grid.points, data.xs, data.ys, h)
    rows = np.flatnonzero(s0 > 0)
    g = grid.size
    vals = np.zeros((g, f.dim))
    defined = np.zeros(g, dtype=bool)
    if rows.size:
        start = f.warm_start(data.xs, data.ys, grid.points[rows], h)
        sub = {"ys": stats["ys"], "xs": stats["xs"], "w": stats["w"][rows]} \
            if isinstance(stats, dict) else stats[rows]
        zeros_j = np.zeros((rows.size, f.dim, f.dim))
        sol, ok = newton_solve(f, sub, zeros_j, np.zeros((rows.size, f.dim)), start,
                               tol=tol, max_iter=max_iter)
        nfail = int((~ok).sum())
        if nfail:
            log.warning("full-data Newton failed at %d of %d grid points", nfail, rows.size)
        good = np.flatnonzero(ok)
        vals[rows[good]] = sol[good]
        if good.size:
            _, jsum = f.weighted_sums(sol[good], sub, good)
            defined[rows[good]] = nondegenerate(jsum, threshold)
    return GridEstimate(grid, vals, defined)


def _average(estimates, grid):
    dim = estimates[0].dim
    tot = np.zeros((grid.size, dim))
    cnt = np.zeros(grid.size, dtype=np.int64)
    for est in estimates:
        tot[est.defined] += est.values[est.defined]
        cnt += est.defined
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(cnt[:, None] > 0, tot / np.maximum(cnt, 1)[:, None], 0.0)
    short = int(((cnt > 0) & (cnt < len(estimates))).sum())
    if short:
        log.info("batch average: %d grid points averaged over fewer than %d batches",
                 short, len(estimates))
    return GridEstimate(grid, vals, cnt > 0, counts=cnt)


def _check_pairs(batches, hs):
    if len(batches) != len(hs):
        raise ValueError(f"{len(batches)} batches but {len(hs)} bandwidths")
    if not batches:
        raise ValueError("no batches")


def nw_batch_average(batches, per_batch_h, k, grid, threshold=DEGENERACY_THRESHOLD):
    """Mean over batches of each batch's own N-W curve.

    A batch contributes only where its own estimate is defined; ``counts``
    on the result records how many batches entered each grid point.
    """
    _check_pairs(batches, per_batch_h)
    return _average([nw_full(b, h, k, grid, threshold) for b, h in zip(batches, per_batch_h)], grid)


def nml_batch_average(batches, per_batch_h, k, f, grid, tol=1e-8, max_iter=50,
                      threshold=DEGENERACY_THRESHOLD):
    _check_pairs(batches, per_batch_h)
    return _average([nml_full(b, h, k, f, grid, tol, max_iter, threshold)
                     for b, h in zip(batches, per_batch_h)], grid)


def spline_full(data, basis):
    """Pooled least-squares coefficients on ``basis``."""
    g, v, gerr, verr = normal_equations(basis_eval(basis, data.xs), data.ys)
    return solve_normal_equations(g, v, 0.0, gerr, verr)


def spline_batch_average(batches, basis, grid):
    """Mean of per-batch spline curves; each batch uses the minimum-norm least-squares fit."""
    bgrid = basis_eval(basis, grid.points)
    ests = []
    for b in batches:
        coef, *_ = np.linalg.lstsq(basis_eval(basis, b.xs), b.ys, rcond=None)
        ests.append(GridEstimate(grid, (bgrid @ coef)[:, None], np.ones(grid.size, dtype=bool)))
    return _average(ests, grid)


def as_grid_estimate(grid, values):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    return GridEstimate(grid, values, np.ones(grid.size, dtype=bool))
