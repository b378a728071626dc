"""Renewable kernel estimators maintained on a fixed evaluation grid.

Each grid point carries the accumulated curvature weight ``jsum`` and the
current estimate.  A new batch is absorbed by solving

    jsum_prev (alpha - alpha_prev) - sum_i U(alpha; Y_i, X_i) K_h(X_i - x) = 0

at every grid point, after which ``jsum`` grows by the batch's kernel-weighted
J evaluated at the new estimate.  No raw observations are retained.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidBatchError
from .estfun import MeanRegression
from .kernel import DEGENERACY_THRESHOLD, GAUSSIAN, kernel_matrix

log = logging.getLogger(__name__)

#: Column block used when forming kernel weight matrices.
CHUNK = 8192


@dataclass(frozen=True)
class EvaluationGrid:
    """Sorted abscissae at which estimates are maintained.

    ``trim`` removes that fraction of the support at each end when scoring.
    """

    points: np.ndarray
    support: tuple
    trim: float = 0.05

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        a, b = (float(v) for v in self.support)
        if pts.ndim != 1 or pts.size == 0:
            raise ValueError("grid needs at least one point")
        if not a < b:
            raise ValueError(f"support must satisfy a < b, got {self.support}")
        if pts.size > 1 and not np.all(np.diff(pts) > 0):
            raise ValueError("grid points must be strictly increasing")
        if pts[0] < a or pts[-1] > b:
            raise ValueError("grid points must lie inside the support")
        if not 0.0 <= self.trim < 0.5:
            raise ValueError(f"trim must lie in [0, 0.5), got {self.trim}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "support", (a, b))
        if not self.interior_mask.any():
            raise ValueError("trimmed interior contains no grid point")

    @classmethod
    def uniform(cls, a, b, size=401, trim=0.05):
        return cls(np.linspace(a, b, int(size)), (a, b), trim)

    @property
    def size(self):
        return self.points.size

    @property
    def interior(self):
        a, b = self.support
        cut = self.trim * (b - a)
        return a + cut, b - cut

    @property
    def interior_mask(self):
        lo, hi = self.interior
        return (self.points >= lo) & (self.points <= hi)

    def is_uniform(self):
        a, b = self.support
        return (self.points[0] == a and self.points[-1] == b
                and np.array_equal(self.points, np.linspace(a, b, self.size)))


@dataclass(frozen=True)
class GridEstimate:
    """Estimated function values on a grid; undefined points carry ``defined=False``."""

    grid: EvaluationGrid
    values: np.ndarray
    defined: np.ndarray
    # for batch averages: number of batches contributing at each point
    counts: np.ndarray = None

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass
class RenewableState:
    grid: EvaluationGrid
    dim: int
    jsum: np.ndarray
    estimate: np.ndarray
    defined_mask: np.ndarray
    batch_count: int = 0
    cumulative_n: int = 0
    # Grid points whose Newton solve failed, summed over all updates.
    nonconverged: int = 0
    last_failures: np.ndarray = field(default=None, repr=False)

    @classmethod
    def fresh(cls, grid, dim=1):
        g = grid.size
        return cls(grid=grid, dim=int(dim),
                   jsum=np.zeros((g, dim, dim)),
                   estimate=np.zeros((g, dim)),
                   defined_mask=np.zeros(g, dtype=bool))

    def as_estimate(self):
        return GridEstimate(self.grid, self.estimate.copy(), self.defined_mask.copy())


def _check_batch(batch):
    if batch is None or len(batch.xs) == 0:
        raise InvalidBatchError("batch is empty")


def leading_minors(mats):
    """Leading principal minors of a stack of square matrices, shape ``(G, dim)``."""
    d = mats.shape[-1]
    if d == 1:
        return mats[:, 0, :].copy()
    return np.stack([np.linalg.det(mats[:, :m, :m]) for m in range(1, d + 1)], axis=1)


def nondegenerate(mats, threshold=DEGENERACY_THRESHOLD):
    return np.all(leading_minors(mats) > threshold, axis=1)


def kernel_stats(f, k, points, xs, ys, h):
    """Batch summaries for ``f`` plus the plain kernel-weight sums, chunked over data."""
    stats = None
    s0 = np.zeros(np.size(points))
    for lo in range(0, xs.size, CHUNK):
        w = kernel_matrix(k, points, xs[lo:lo + CHUNK], h)
        part = f.batch_stats(ys[lo:lo + CHUNK], xs[lo:lo + CHUNK], w)
        stats = part if stats is None else f.merge_stats(stats, part)
        s0 += w.sum(axis=1)
    return stats, s0


def _solve(m, rhs):
    """Solve ``m @ x = rhs`` for stacks; forward substitution when lower triangular."""
    d = m.shape[-1]
    if d == 1:
        return rhs / m[:, 0, :]
    if not np.any(np.triu(m, 1)):
        out = np.empty_like(rhs)
        for i in range(d):
            acc = rhs[:, i] - np.einsum("gk,gk->g", m[:, i, :i], out[:, :i])
            out[:, i] = acc / m[:, i, i]
        return out
    return np.linalg.solve(m, rhs[..., None])[..., 0]


def newton_solve(f, stats, jprev, aprev, start, tol=1e-8, max_iter=50, max_halvings=30):
    """Damped Newton for ``jprev (a - aprev) - Usum(a) = 0``, row-wise.

    All array arguments are restricted to the rows being solved.  Returns the
    solution and a boolean convergence mask.  A step is halved while it leaves
    the domain of ``f`` or fails to reduce the residual norm.
    """
    m = start.shape[0]
    rows = np.arange(m)
    alpha = start.astype(np.float64, copy=True)
    converged = np.zeros(m, dtype=bool)
    failed = ~f.in_domain(alpha)

    def residual(a, idx):
        usum, jsum = f.weighted_sums(a, stats, idx)
        dev = np.einsum("gde,ge->gd", jprev[idx], a - aprev[idx])
        return dev - usum, jprev[idx] + jsum

    live = rows[~failed]
    with np.errstate(all="ignore"):
        for it in range(max_iter):
            if live.size == 0:
                break
            g, jac = residual(alpha[live], live)
            gnorm = np.linalg.norm(g, axis=1)
            # at least one step is always taken, which makes affine equations exact
            small = (gnorm <= tol) & (it > 0)
            converged[live[small]] = True
            live, g, jac, gnorm = live[~small], g[~small], jac[~small], gnorm[~small]
            if live.size == 0:
                break
            step = -_solve(jac, g)
            snorm = np.linalg.norm(step, axis=1)
            bad = ~np.isfinite(snorm)
            failed[live[bad]] = True
            keep = ~bad
            live, step, snorm, gnorm = live[keep], step[keep], snorm[keep], gnorm[keep]

            tiny = snorm <= tol
            t = np.ones(live.size)
            accepted = np.zeros(live.size, dtype=bool)
            for _halving in range(max_halvings + 1):
                todo = np.flatnonzero(~accepted)
                if todo.size == 0:
                    break
                trial = alpha[live[todo]] + t[todo, None] * step[todo]
                ok = f.in_domain(trial)
                if ok.any():
                    okidx = todo[ok]
                    gt, _ = residual(trial[ok], live[okidx])
                    better = np.linalg.norm(gt, axis=1) < gnorm[okidx]
                    # a step below tolerance is taken even at the rounding floor
                    better |= tiny[okidx]
                    accepted[okidx[better]] = True
                t[todo[~accepted[todo]]] *= 0.5
            for idx in np.flatnonzero(accepted):
                alpha[live[idx]] += t[idx] * step[idx]
            done = accepted & (t * snorm <= tol)
            converged[live[done]] = True
            failed[live[~accepted]] = True
            live = live[accepted & ~done]
    return alpha, converged & ~failed


def update_closed_form(state, batch, h, k=GAUSSIAN, threshold=DEGENERACY_THRESHOLD):
    """Absorb one batch under U = y - alpha using the ratio form.

    new = (prev * W_prev + sum_i Y_i K_h(X_i - x)) / (W_prev + sum_i K_h(X_i - x))
    """
    _check_batch(batch)
    if state.dim != 1:
        raise ValueError("the closed form applies to scalar mean regression only")
    stats, _ = kernel_stats(MeanRegression(), k, state.grid.points, batch.xs, batch.ys, h)
    s0, sy = stats[:, 0], stats[:, 1]
    wprev = state.jsum[:, 0, 0]
    prev = state.estimate[:, 0]
    wnew = wprev + s0
    with np.errstate(invalid="ignore", divide="ignore"):
        est = np.where(wnew > 0, (prev * wprev + sy) / wnew, prev)
    return replace(
        state,
        jsum=wnew[:, None, None].copy(),
        estimate=est[:, None],
        defined_mask=wnew > threshold,
        batch_count=state.batch_count + 1,
        cumulative_n=state.cumulative_n + len(batch),
        last_failures=np.zeros(state.grid.size, dtype=bool),
    )


def update_newton(state, batch, h, k=GAUSSIAN, f=None, tol=1e-8, max_iter=50,
                  threshold=DEGENERACY_THRESHOLD):
    """Absorb one batch by the incremental Newton iteration for estimating function ``f``."""
    _check_batch(batch)
    f = MeanRegression() if f is None else f
    if f.dim != state.dim:
        raise ValueError(f"estimating function has dim {f.dim}, state has dim {state.dim}")
    points = state.grid.points
    stats, s0 = kernel_stats(f, k, points, batch.xs, batch.ys, h)
    jprev = state.jsum
    aprev = state.estimate
    active = (s0 > 0) | (np.abs(jprev).sum(axis=(1, 2)) > 0)
    rows = np.flatnonzero(active)

    if state.batch_count == 0:
        start = f.warm_start(batch.xs, batch.ys, points, h)
    else:
        start = aprev
    sub_stats = _restrict(f, stats, rows)
    sol, ok = newton_solve(f, sub_stats, jprev[rows], aprev[rows], start[rows],
                           tol=tol, max_iter=max_iter)

    estimate = aprev.copy()
    jsum = jprev.copy()
    good = rows[ok]
    estimate[good] = sol[ok]
    if good.size:
        _, jinc = f.weighted_sums(sol[ok], sub_stats, np.flatnonzero(ok))
        jsum[good] = jprev[good] + jinc
    failures = np.zeros(state.grid.size, dtype=bool)
    failures[rows[~ok]] = True
    nfail = int(failures.sum())
    if nfail:
        log.warning("Newton failed to converge at %d of %d grid points (batch %d)",
                    nfail, rows.size, state.batch_count + 1)
    defined = nondegenerate(jsum, threshold) & ~failures
    return replace(
        state,
        jsum=jsum,
        estimate=estimate,
        defined_mask=defined,
        batch_count=state.batch_count + 1,
        cumulative_n=state.cumulative_n + len(batch),
        nonconverged=state.nonconverged + nfail,
        last_failures=failures,
    )


def _restrict(f, stats, rows):
    if isinstance(stats, dict):
        return {"ys": stats["ys"], "xs": stats["xs"], "w": stats["w"][rows]}
    return stats[rows]


def evaluate(state, x):
    """Piecewise-linear interpolation between defined grid points.

    Returns a length-``dim`` array, or ``None`` outside the span of defined points.
    """
    est = state.as_estimate() if isinstance(state, RenewableState) else state
    pts = est.grid.points[est.defined]
    if pts.size == 0 or not pts[0] <= x <= pts[-1]:
        return None
    vals = est.values[est.defined]
    return np.array([np.interp(x, pts, vals[:, d]) for d in range(vals.shape[1])])
