"""Renewable cubic regression spline on the truncated power basis.

The stream only touches the normal equations: ``bmat = sum B(x) B(x)^T`` and
``vvec = sum B(x) y``.  They are accumulated row by row in stream order, so
the streamed system is bit-identical to the pooled one and solving it gives
the pooled least-squares fit for the same knots.
"""

from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy import linalg

from .errors import InvalidBatchError, SingularSystemError

@dataclass(frozen=True)
class SplineBasis:
    """Cubic truncated power basis ``(1, u, u^2, u^3, (u - t_1)_+^3, ...)``.

    ``u = (x - center) / scale``; the default identity transform evaluates the
    basis on raw x.  Knots are given in the original x units.
    """

    knots: np.ndarray
    support: tuple
    center: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        t = np.ascontiguousarray(self.knots, dtype=np.float64).reshape(-1)
        a, b = (float(v) for v in self.support)
        if not a < b:
            raise ValueError(f"support must satisfy a < b, got {self.support}")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("knots must be strictly increasing")
        if t.size and (t[0] <= a or t[-1] >= b):
            raise ValueError("knots must lie strictly inside the support")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "knots", t)
        object.__setattr__(self, "support", (a, b))

    @classmethod
    def equidistant(cls, a, b, count, standardize=True):
        """``count`` equally spaced interior knots on (a, b)."""
        knots = a + (b - a) * np.arange(1, count + 1) / (count + 1)
        if standardize:
            return cls(knots, (a, b), center=0.5 * (a + b), scale=0.5 * (b - a))
        return cls(knots, (a, b))

    @property
    def basis_dim(self):
        return 4 + self.knots.size


def basis_eval(b, x):
    """Basis matrix of shape ``(len(x), basis_dim)``; a 1-d vector for scalar x."""
    xv = np.asarray(x, dtype=np.float64)
    u = (np.atleast_1d(xv) - b.center) / b.scale
    t = (b.knots - b.center) / b.scale
    out = np.empty((u.size, b.basis_dim))
    out[:, 0] = 1.0
    out[:, 1] = u
    out[:, 2] = u * u
    out[:, 3] = u * u * u
    if t.size:
        d = np.maximum(u[:, None] - t[None, :], 0.0)
        out[:, 4:] = d * d * d
    return out[0] if xv.ndim == 0 else out


def predict(b, gamma, x):
    return basis_eval(b, x) @ gamma


@dataclass
class SplineState:
    """Accumulated normal equations.

    ``bmat_err`` and ``vvec_err`` hold the rounding error of ``bmat`` and
    ``vvec``, so ``bmat + bmat_err`` carries the sums to about twice working
    precision.
    """

    basis: SplineBasis
    bmat: np.ndarray
    vvec: np.ndarray
    batch_count: int = 0
    cumulative_n: int = 0
    bmat_err: np.ndarray = None
    vvec_err: np.ndarray = None

    def __post_init__(self):
        if self.bmat_err is None:
            self.bmat_err = np.zeros_like(self.bmat)
        if self.vvec_err is None:
            self.vvec_err = np.zeros_like(self.vvec)

    @classmethod
    def fresh(cls, basis):
        p = basis.basis_dim
        return cls(basis, np.zeros((p, p)), np.zeros(p))


_SPLIT = 134217729.0  # 2**27 + 1


@njit(inline="always")
def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@njit(inline="always")
def _two_prod(a, b):
    p = a * b
    t = _SPLIT * a
    ah = t - (t - a)
    al = a - ah
    t = _SPLIT * b
    bh = t - (t - b)
    bl = b - bh
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


@njit(cache=True)
def _accumulate(bx, ys, g, gerr, v, verr):
    # Left fold over rows with error-free products and sums: continuing from a
    # carried state performs exactly the operations of one pooled pass.
    n, p = bx.shape
    for i in range(n):
        for j in range(p):
            bj = bx[i, j]
            prod, pe = _two_prod(bj, ys[i])
            s, se = _two_sum(v[j], prod)
            v[j] = s
            verr[j] += se + pe
            for k in range(j, p):
                prod, pe = _two_prod(bj, bx[i, k])
                s, se = _two_sum(g[j, k], prod)
                g[j, k] = s
                gerr[j, k] += se + pe
    for j in range(p):
        for k in range(j + 1, p):
            g[k, j] = g[j, k]
            gerr[k, j] = gerr[j, k]


@njit(cache=True)
def _residual(g, gerr, v, verr, x, ridge):
    """``(v + verr) - (g + gerr + ridge I) x`` evaluated in double-double."""
    p = x.size
    r = np.empty(p)
    for i in range(p):
        hi = v[i]
        lo = verr[i]
        for j in range(p):
            prod, pe = _two_prod(g[i, j], x[j])
            hi, se = _two_sum(hi, -prod)
            lo += se - pe - gerr[i, j] * x[j]
        prod, pe = _two_prod(ridge, x[i])
        hi, se = _two_sum(hi, -prod)
        lo += se - pe
        r[i] = hi + lo
    return r


def normal_equations(bx, ys, state=None):
    """Add ``sum B B^T`` and ``sum B y`` to copies of ``state``'s sums.

    ``state`` is a ``(bmat, vvec, bmat_err, vvec_err)`` tuple; zeros when None.
    Returns a tuple of the same form.
    """
    p = bx.shape[1]
    if state is None:
        state = (np.zeros((p, p)), np.zeros(p), np.zeros((p, p)), np.zeros(p))
    g, v, gerr, verr = (np.array(a, dtype=np.float64) for a in state)
    _accumulate(np.ascontiguousarray(bx, dtype=np.float64),
                np.ascontiguousarray(ys, dtype=np.float64), g, gerr, v, verr)
    return g, v, gerr, verr


def update_spline(state, batch):
    if batch is None or len(batch.xs) == 0:
        raise InvalidBatchError("batch is empty")
    g, v, gerr, verr = normal_equations(
        basis_eval(state.basis, batch.xs), batch.ys,
        (state.bmat, state.vvec, state.bmat_err, state.vvec_err))
    return replace(state, bmat=g, vvec=v, bmat_err=gerr, vvec_err=verr,
                   batch_count=state.batch_count + 1,
                   cumulative_n=state.cumulative_n + len(batch))


def solve_normal_equations(bmat, vvec, ridge=0.0, bmat_err=None, vvec_err=None, refine=10):
    """Cholesky solve of ``(bmat + ridge I) gamma = vvec`` with iterative refinement.

    Residuals are formed in double-double from the compensated sums, which
    removes the conditioning loss of the truncated power basis as long as
    the system is not numerically singular.
    """
    p = bmat.shape[0]
    a = bmat + ridge * np.eye(p)
    eig = np.linalg.eigvalsh(a)
    floor = 1e-12 * max(np.trace(a), 0.0) / p
    if not eig[0] > floor:
        raise SingularSystemError("normal equations are singular", float(eig[0]))
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=True)
    except linalg.LinAlgError:
        raise SingularSystemError("Cholesky factorization failed", float(eig[0])) from None
    gerr = np.zeros_like(bmat) if bmat_err is None else np.asarray(bmat_err, dtype=np.float64)
    verr = np.zeros_like(vvec) if vvec_err is None else np.asarray(vvec_err, dtype=np.float64)
    g = np.ascontiguousarray(bmat, dtype=np.float64)
    v = np.ascontiguousarray(vvec, dtype=np.float64)
    x = linalg.cho_solve(factor, v)
    best, best_norm = x, np.inf
    for _ in range(refine):
        r = _residual(g, gerr, v, verr, x, float(ridge))
        rnorm = float(np.linalg.norm(r))
        if rnorm < best_norm:
            best, best_norm = x, rnorm
        else:
            break
        dx = linalg.cho_solve(factor, r)
        if not np.all(np.isfinite(dx)):
            break
        x = x + dx
        if np.max(np.abs(dx)) <= 1e-16 * np.max(np.abs(x)):
            break
    return best


def solve_spline(state, ridge=0.0):
    """Coefficients solving ``(bmat + ridge I) gamma = vvec``."""
    return solve_normal_equations(state.bmat, state.vvec, ridge, state.bmat_err, state.vvec_err)


def loo_cv_knots(xs, ys, count, a=None, b=None):
    """Leave-one-out CV error of the pooled spline with ``count`` equidistant knots.

    Uses the hat-matrix identity ``e_i / (1 - h_ii)``; returns ``inf`` when
    the design is singular or some observation has leverage one.
    """
    a = float(np.min(xs)) if a is None else a
    b = float(np.max(xs)) if b is None else b
    basis = SplineBasis.equidistant(a, b, count)
    bx = basis_eval(basis, xs)
    g, v, gerr, verr = normal_equations(bx, ys)
    try:
        coef = solve_normal_equations(g, v, 0.0, gerr, verr)
        chol = linalg.cho_factor(g, lower=True)
    except (SingularSystemError, linalg.LinAlgError):
        return np.inf
    lev = np.einsum("ij,ji->i", bx, linalg.cho_solve(chol, bx.T))
    if np.any(lev >= 1.0 - 1e-8):
        return np.inf
    resid = (ys - bx @ coef) / (1.0 - lev)
    return float(np.mean(resid * resid))


def select_knot_count(xs, ys, counts=range(2, 21), a=None, b=None):
    """Knot count with the smallest leave-one-out error; ties go to fewer knots."""
    counts = sorted(counts)
    scores = np.array([loo_cv_knots(xs, ys, c, a, b) for c in counts])
    if not np.isfinite(scores).any():
        raise SingularSystemError("no knot count gives a solvable fit", float("nan"))
    return counts[int(np.argmin(scores))]
