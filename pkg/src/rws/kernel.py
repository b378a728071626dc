"""Smoothing kernels, bandwidth schedules and cross-validated bandwidth constants."""

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidBandwidthError, InvalidCountError, NoValidBandwidthError

#: Accumulated kernel weight below which an estimate is treated as undefined.
DEGENERACY_THRESHOLD = 1e-8

#: Exponent of the bandwidth rate ``h = c * N**(-1/5)``.
RATE_EXPONENT = -0.2

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Gaussian weights beyond 8 bandwidths are below 1.3e-14 of the peak.
_GAUSS_CUTOFF = 8.0


@dataclass(frozen=True)
class KernelSpec:
    """A symmetric second-order kernel and its moment constants.

    ``mu2`` is the second moment and ``l2norm`` is the integral of the
    squared kernel.
    """

    kind: str
    mu2: float
    l2norm: float

    def __call__(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "gaussian":
            return _INV_SQRT_2PI * np.exp(-0.5 * u * u)
        if self.kind == "epanechnikov":
            return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
        raise ValueError(f"unknown kernel kind {self.kind!r}")

    @property
    def support_radius(self):
        """Half-width beyond which weights are negligible (or exactly zero)."""
        return _GAUSS_CUTOFF if self.kind == "gaussian" else 1.0


GAUSSIAN = KernelSpec("gaussian", mu2=1.0, l2norm=0.5 / math.sqrt(math.pi))
EPANECHNIKOV = KernelSpec("epanechnikov", mu2=0.2, l2norm=0.6)

KERNELS = {k.kind: k for k in (GAUSSIAN, EPANECHNIKOV)}


def get_kernel(name):
    try:
        return KERNELS[name]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}") from None


def _check_bandwidth(h):
    if not (np.isfinite(h) and h > 0):
        raise InvalidBandwidthError(f"bandwidth must be positive and finite, got {h!r}")


def kernel_weight(k, u, h):
    """Scaled kernel ``K(u / h) / h``; vectorized over ``u``."""
    _check_bandwidth(h)
    return k(np.asarray(u, dtype=np.float64) / h) / h


def kernel_matrix(k, points, xs, h):
    """Weights ``K_h(xs[i] - points[g])`` as a ``(len(points), len(xs))`` array."""
    _check_bandwidth(h)
    points = np.asarray(points, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    return k((xs[None, :] - points[:, None]) / h) / h


@dataclass(frozen=True)
class BandwidthSchedule:
    """Bandwidth rule ``h = constant * N**exponent`` in the cumulative count N."""

    constant: float
    exponent: float = RATE_EXPONENT

    def __post_init__(self):
        _check_bandwidth(self.constant)

    def __call__(self, cumulative_n):
        return schedule_bandwidth(self, cumulative_n)


def schedule_bandwidth(s, cumulative_n):
    if cumulative_n < 1 or int(cumulative_n) != cumulative_n:
        raise InvalidCountError(f"cumulative count must be a positive integer, got {cumulative_n!r}")
    return s.constant * float(cumulative_n) ** s.exponent


def default_cv_grid(lo=0.1, hi=5.0, size=16):
    """Geometric grid of candidate bandwidth constants."""
    return np.geomspace(lo, hi, size)


@numba.njit(cache=True, nogil=True)
def _loo_sums(xs, ys, h, ends, gaussian):
    # xs sorted ascending; ends[i] is one past the last j with xs[j] - xs[i] inside the window.
    n = xs.size
    num = np.zeros(n)
    den = np.zeros(n)
    scale = 1.0 / h
    for i in range(n):
        xi = xs[i]
        yi = ys[i]
        acc_num = 0.0
        acc_den = 0.0
        for j in range(i + 1, ends[i]):
            u = (xs[j] - xi) * scale
            if gaussian:
                w = math.exp(-0.5 * u * u) * _INV_SQRT_2PI * scale
            else:
                w = 0.75 * (1.0 - u * u) * scale if u <= 1.0 else 0.0
            acc_num += w * ys[j]
            acc_den += w
            num[j] += w * yi
            den[j] += w
        num[i] += acc_num
        den[i] += acc_den
    return num, den


def _loo_residuals(xs, ys, k, h, threshold):
    """Leave-one-out residuals on sorted data and the mask of usable observations."""
    _check_bandwidth(h)
    ends = np.searchsorted(xs, xs + k.support_radius * h, side="right").astype(np.int64)
    num, den = _loo_sums(xs, ys, float(h), ends, k.kind == "gaussian")
    ok = den > threshold
    resid = np.zeros_like(ys)
    resid[ok] = ys[ok] - num[ok] / den[ok]
    return resid, ok


def _sorted(xs, ys):
    order = np.argsort(xs, kind="stable")
    return (np.ascontiguousarray(np.asarray(xs, dtype=np.float64)[order]),
            np.ascontiguousarray(np.asarray(ys, dtype=np.float64)[order]))


def loo_cv_score(xs, ys, k, h, threshold=DEGENERACY_THRESHOLD):
    """Leave-one-out squared prediction error of the N-W smoother.

    Observations whose leave-one-out weight sum is at or below ``threshold``
    are skipped.  Returns ``inf`` when every observation is skipped.
    """
    xs, ys = _sorted(xs, ys)
    resid, ok = _loo_residuals(xs, ys, k, h, threshold)
    if not ok.any():
        return math.inf
    return float(np.mean(resid[ok] ** 2))


def select_cv_constant(data, k, candidates=None, threshold=DEGENERACY_THRESHOLD):
    """Pick the bandwidth constant c minimizing leave-one-out CV error.

    Each candidate is scored at bandwidth ``c * len(data) ** (-1/5)``.  All
    candidates are scored on the same observations: those whose leave-one-out
    weight sum exceeds ``threshold`` under every candidate.  Otherwise a small
    bandwidth could win by skipping the isolated points it predicts worst.  If
    no observation qualifies, the smallest candidates are dropped one at a time
    until one does.  Scores equal to within ``1e-12 * mean(y**2)`` count as
    ties and the smaller c wins.
    """
    xs, ys = _sorted(data.xs, data.ys)
    n = xs.size
    if n < 10:
        raise InvalidCountError(f"cross-validation needs at least 10 observations, got {n}")
    cands = default_cv_grid() if candidates is None else np.asarray(candidates, dtype=np.float64)
    if cands.size == 0:
        raise ValueError("candidate list is empty")
    cands = np.unique(cands)
    rate = float(n) ** RATE_EXPONENT
    fits = [_loo_residuals(xs, ys, k, c * rate, threshold) for c in cands]
    usable = [i for i, (_, ok) in enumerate(fits) if ok.any()]
    if not usable:
        raise NoValidBandwidthError("every candidate bandwidth is degenerate at every observation")
    while True:
        common = np.logical_and.reduce([fits[i][1] for i in usable])
        if common.any():
            break
        usable = usable[1:]
    scores = np.array([float(np.mean(fits[i][0][common] ** 2)) for i in usable])
    best = scores.min()
    tie = 1e-12 * float(np.mean(ys * ys))
    return float(cands[usable[int(np.flatnonzero(scores <= best + tie)[0])]])
