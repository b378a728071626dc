"""Estimating functions U(alpha; y, x) and their curvature J = -dU/dalpha.

An :class:`EstimatingFunction` works on broadcast arrays: ``alpha`` has a
trailing axis of length ``dim``, while ``y`` and ``x`` broadcast against the
remaining axes.  The renewable engine only needs kernel-weighted sums of U
and J over a batch, so every function also exposes :meth:`batch_stats` and
:meth:`weighted_sums`; the built-ins override these with moment shortcuts.
"""

import numpy as np

from .errors import DomainError
from .special import digamma, trigamma


class EstimatingFunction:
    """User-definable estimating function.

    Parameters
    ----------
    dim : int
        Length of the parameter vector alpha.
    u : callable
        ``u(alpha, y, x)`` returning an array of shape ``(..., dim)``.
    j : callable, optional
        ``j(alpha, y, x)`` returning ``(..., dim, dim)``.  Central finite
        differences of ``u`` are used when omitted.
    name : str
    domain : callable, optional
        ``domain(alpha)`` returning a boolean mask over leading axes.
    """

    fd_step = 1e-6

    def __init__(self, dim, u=None, j=None, name="custom", domain=None):
        self.dim = int(dim)
        self.name = name
        self._u = u
        self._j = j
        self._domain = domain

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, dim={self.dim})"

    # -- pointwise -------------------------------------------------------
    def u(self, alpha, y, x):
        return np.asarray(self._u(alpha, y, x), dtype=np.float64)

    def j(self, alpha, y, x):
        if self._j is not None:
            return np.asarray(self._j(alpha, y, x), dtype=np.float64)
        return self._fd_jacobian(alpha, y, x)

    def _fd_jacobian(self, alpha, y, x):
        alpha = np.asarray(alpha, dtype=np.float64)
        cols = []
        for m in range(self.dim):
            step = self.fd_step * (1.0 + np.abs(alpha[..., m]))
            up = alpha.copy()
            dn = alpha.copy()
            up[..., m] += step
            dn[..., m] -= step
            d = (self.u(up, y, x) - self.u(dn, y, x)) / (2.0 * step)[..., None]
            cols.append(-d)
        return np.stack(cols, axis=-1)

    def in_domain(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        ok = np.all(np.isfinite(alpha), axis=-1)
        if self._domain is not None:
            ok &= np.asarray(self._domain(alpha), dtype=bool)
        return ok

    # -- kernel-weighted batch sums --------------------------------------
    def batch_stats(self, ys, xs, weights):
        """Summaries of one batch under a ``(G, n)`` weight matrix."""
        return {"ys": ys, "xs": xs, "w": weights}

    def merge_stats(self, a, b):
        return {"ys": np.concatenate([a["ys"], b["ys"]]),
                "xs": np.concatenate([a["xs"], b["xs"]]),
                "w": np.concatenate([a["w"], b["w"]], axis=1)}

    def weighted_sums(self, alpha, stats, rows):
        """Return ``sum_i w[g,i] U(alpha_g; y_i, x_i)`` and the same for J.

        ``alpha`` has shape ``(len(rows), dim)``; ``rows`` selects grid points.
        """
        w = stats["w"][rows]
        a = alpha[:, None, :]
        uu = self.u(a, stats["ys"][None, :], stats["xs"][None, :])
        jj = self.j(a, stats["ys"][None, :], stats["xs"][None, :])
        return (np.einsum("gn,gnd->gd", w, uu),
                np.einsum("gn,gnde->gde", w, jj))

    def warm_start(self, xs, ys, points, h):
        """Starting value for the first Newton solve (zero by default)."""
        return np.zeros((np.size(points), self.dim))


def _moments(ys, weights, extra=()):
    cols = [np.ones_like(ys), ys, *extra]
    return weights @ np.stack(cols, axis=1)


class MeanRegression(EstimatingFunction):
    """U = y - alpha, J = 1."""

    def __init__(self):
        super().__init__(1, name="mean")

    def u(self, alpha, y, x):
        alpha = np.asarray(alpha, dtype=np.float64)
        return (np.asarray(y) - alpha[..., 0])[..., None]

    def j(self, alpha, y, x):
        alpha = np.asarray(alpha, dtype=np.float64)
        shape = np.broadcast_shapes(alpha.shape[:-1], np.shape(y), np.shape(x))
        return np.ones(shape + (1, 1))

    def batch_stats(self, ys, xs, weights):
        return _moments(ys, weights)

    def merge_stats(self, a, b):
        return a + b

    def weighted_sums(self, alpha, stats, rows):
        s = stats[rows]
        usum = s[:, 1:2] - alpha * s[:, 0:1]
        return usum, s[:, 0][:, None, None].copy()


class MeanVariance(EstimatingFunction):
    """alpha = (r, s): U = (y - r, (y - r)**2 - s), J = [[1, 0], [2(y - r), 1]]."""

    def __init__(self):
        super().__init__(2, name="mean-var")

    def u(self, alpha, y, x):
        alpha = np.asarray(alpha, dtype=np.float64)
        e = np.asarray(y) - alpha[..., 0]
        return np.stack(np.broadcast_arrays(e, e * e - alpha[..., 1]), axis=-1)

    def j(self, alpha, y, x):
        alpha = np.asarray(alpha, dtype=np.float64)
        e = np.asarray(y) - alpha[..., 0]
        e, _ = np.broadcast_arrays(e, alpha[..., 1])
        out = np.zeros(e.shape + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0
        out[..., 1, 0] = 2.0 * e
        return out

    def batch_stats(self, ys, xs, weights):
        return _moments(ys, weights, (ys * ys,))

    def merge_stats(self, a, b):
        return a + b

    def weighted_sums(self, alpha, stats, rows):
        s = stats[rows]
        s0, s1, s2 = s[:, 0], s[:, 1], s[:, 2]
        r, v = alpha[:, 0], alpha[:, 1]
        usum = np.stack([s1 - r * s0, s2 - 2.0 * r * s1 + r * r * s0 - v * s0], axis=1)
        jsum = np.zeros((s.shape[0], 2, 2))
        jsum[:, 0, 0] = s0
        jsum[:, 1, 1] = s0
        jsum[:, 1, 0] = 2.0 * (s1 - r * s0)
        return usum, jsum


class GammaShapeScore(EstimatingFunction):
    """Shape score of Gamma(a, scale 1): U = log y - psi(a), J = psi'(a)."""

    def __init__(self):
        super().__init__(1, name="gamma", domain=lambda a: a[..., 0] > 0)

    def u(self, alpha, y, x):
        alpha = np.asarray(alpha, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if np.any(alpha[..., 0] <= 0) or np.any(y <= 0):
            raise DomainError("gamma score needs positive shape and response")
        return (np.log(y) - digamma(alpha[..., 0]))[..., None]

    def j(self, alpha, y, x):
        alpha = np.asarray(alpha, dtype=np.float64)
        if np.any(alpha[..., 0] <= 0) or np.any(np.asarray(y) <= 0):
            raise DomainError("gamma score needs positive shape and response")
        tg = trigamma(alpha[..., 0])
        shape = np.broadcast_shapes(np.shape(tg), np.shape(y), np.shape(x))
        return np.broadcast_to(np.asarray(tg)[..., None, None], shape + (1, 1)).copy()

    def batch_stats(self, ys, xs, weights):
        if np.any(ys <= 0):
            raise DomainError("gamma score needs positive responses")
        return _moments(ys, weights, (np.log(ys),))

    def merge_stats(self, a, b):
        return a + b

    def weighted_sums(self, alpha, stats, rows):
        s = stats[rows]
        a = alpha[:, 0]
        usum = (s[:, 2] - digamma(a) * s[:, 0])[:, None]
        return usum, (trigamma(a) * s[:, 0])[:, None, None]

    def warm_start(self, xs, ys, points, h):
        # With unit scale the mean equals the shape, so the local mean is the moment estimate.
        points = np.asarray(points, dtype=np.float64)
        near = np.abs(xs[None, :] - points[:, None]) <= 3.0 * h
        cnt = near.sum(axis=1)
        tot = near @ ys
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = tot / cnt
        start = np.where((cnt > 0) & (mean > 0), mean, 1.0)
        return start[:, None]


BUILTINS = {
    "mean": MeanRegression,
    "mean-var": MeanVariance,
    "gamma": GammaShapeScore,
}


def get_estfun(name):
    try:
        return BUILTINS[name]()
    except KeyError:
        raise ValueError(f"unknown estimating function {name!r}; choose from {sorted(BUILTINS)}") from None


def _as_alpha(f, alpha):
    a = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    if a.shape[-1] != f.dim:
        raise ValueError(f"{f.name} expects a parameter of length {f.dim}, got {a.shape[-1]}")
    return a


def eval_u(f, alpha, y, x=0.0):
    """U(alpha; y, x) for one observation, as a length-``dim`` vector."""
    return f.u(_as_alpha(f, alpha), y, x)


def eval_j(f, alpha, y, x=0.0):
    """J(alpha; y, x) = -dU/dalpha for one observation, as a ``dim x dim`` matrix."""
    return f.j(_as_alpha(f, alpha), y, x)
