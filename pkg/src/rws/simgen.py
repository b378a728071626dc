"""Seeded synthetic streams for the three simulation models.

Randomness is keyed, not sequential.  Philox4x64 with key ``(seed,
replication_id)`` supplies one four-word block per observation: block
``[i, 0, 0, 0]`` belongs to observation ``i`` of the stream, and block
``[i, t, 0, 0]`` serves the t-th rejection retry of the gamma sampler.  So
any batch can be generated independently, and the batch layout never changes
the data.

Word usage within a block: word 0 -> covariate, word 1 -> normal variate (by
inverse CDF), word 2 -> rejection uniform, word 3 -> shape-boost uniform.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .data import Batch
from .errors import DomainError, InvalidCountError

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ModelSpec:
    name: str
    family: str
    support: tuple
    dim: int
    estfun: str

    def true_fn(self, x):
        """Estimand at ``x`` as an array of shape ``(len(x), dim)``."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if self.family == "Homoscedastic":
            return np.sin(2.0 * x)[:, None]
        if self.family == "Heteroscedastic":
            sd = np.exp(x) - 0.25
            return np.stack([x + np.cos(np.pi * x), sd * sd], axis=1)
        if self.family == "GammaLaw":
            return np.exp(np.cos(x) / 2.0)[:, None]
        raise ValueError(self.family)


HOMO = ModelSpec("homo", "Homoscedastic", (-3.0, 3.0), 1, "mean")
HETERO = ModelSpec("hetero", "Heteroscedastic", (-1.0, 1.0), 2, "mean-var")
GAMMA = ModelSpec("gamma", "GammaLaw", (-1.0, 1.0), 1, "gamma")

MODELS = {m.name: m for m in (HOMO, HETERO, GAMMA)}


def get_model(name):
    try:
        return MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


@dataclass(frozen=True)
class StreamPlan:
    total_n: int
    batch_size: int
    seed: int
    replication_id: int = 0

    def __post_init__(self):
        if self.total_n < 1:
            raise InvalidCountError(f"total_n must be >= 1, got {self.total_n}")
        if self.batch_size < 1:
            raise InvalidCountError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def n_batches(self):
        return -(-self.total_n // self.batch_size)


def _key(seed, replication_id):
    return np.array([seed & _MASK64, replication_id & _MASK64], dtype=np.uint64)


def _blocks(key, start, count, retry=0):
    counter = np.array([start, retry, 0, 0], dtype=np.uint64)
    raw = np.random.Philox(key=key, counter=counter).random_raw(4 * count)
    return raw.reshape(count, 4)


def _uniform(words):
    # 53-bit midpoint rule: strictly inside (0, 1)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def _mt_accept(d, c, z, u):
    """Marsaglia-Tsang squeeze and log tests; returns (accepted, d * v)."""
    v = 1.0 + c * z
    v = v * v * v
    pos = v > 0
    vs = np.where(pos, v, 1.0)
    z2 = z * z
    squeeze = u < 1.0 - 0.0331 * z2 * z2
    full = np.log(u) < 0.5 * z2 + d * (1.0 - vs + np.log(vs))
    return pos & (squeeze | full), d * vs


def _check_shape(shape):
    if not np.all(np.asarray(shape) > 0) or not np.all(np.isfinite(shape)):
        raise DomainError("gamma shape must be positive and finite")


def gamma_sample(shape, rng, size=None):
    """Gamma(shape, 1) variates from a numpy Generator.

    Shapes below one draw at ``shape + 1`` and rescale by ``U**(1/shape)``.
    Returns a float when ``size`` is None, otherwise an array of ``size`` draws.
    """
    _check_shape(shape)
    a = float(shape)
    m = 1 if size is None else int(size)
    boost = np.ones(m)
    if a < 1.0:
        boost = (1.0 - rng.random(m)) ** (1.0 / a)
        a += 1.0
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(m)
    todo = np.arange(m)
    while todo.size:
        z = ndtri(1.0 - rng.random(todo.size))
        u = 1.0 - rng.random(todo.size)
        ok, val = _mt_accept(d, c, z, u)
        out[todo[ok]] = val[ok]
        todo = todo[~ok]
    out *= boost
    return float(out[0]) if size is None else out


def _keyed_gamma(shape, words, key, start):
    """Vectorized gamma draws for observations ``start, start+1, ...``."""
    _check_shape(shape)
    small = shape < 1.0
    a = np.where(small, shape + 1.0, shape)
    boost = np.where(small, _uniform(words[:, 3]) ** (1.0 / shape), 1.0)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    ok, val = _mt_accept(d, c, ndtri(_uniform(words[:, 1])), _uniform(words[:, 2]))
    out = val
    for i in np.flatnonzero(~ok):
        trial = 1
        while True:
            w = _blocks(key, start + i, 1, retry=trial)[0]
            acc, v = _mt_accept(d[i], c[i], ndtri(_uniform(w[1])), _uniform(w[2]))
            if acc:
                out[i] = v
                break
            trial += 1
    return out * boost


def generate_points(m, seed, replication_id, start, stop):
    """Observations ``start .. stop-1`` of the keyed stream as ``(xs, ys)``."""
    count = stop - start
    if count < 0:
        raise InvalidCountError("stop precedes start")
    key = _key(seed, replication_id)
    words = _blocks(key, start, count)
    lo, hi = m.support
    xs = lo + (hi - lo) * _uniform(words[:, 0])
    if m.family == "Homoscedastic":
        ys = np.sin(2.0 * xs) + 0.2 * ndtri(_uniform(words[:, 1]))
    elif m.family == "Heteroscedastic":
        ys = xs + np.cos(np.pi * xs) + (np.exp(xs) - 0.25) * ndtri(_uniform(words[:, 1]))
    elif m.family == "GammaLaw":
        ys = _keyed_gamma(np.exp(np.cos(xs) / 2.0), words, key, start)
    else:
        raise ValueError(m.family)
    return xs, ys


def generate_stream(m, p):
    """The stream described by ``p`` as an ordered list of batches."""
    xs, ys = generate_points(m, p.seed, p.replication_id, 0, p.total_n)
    return [Batch(xs[lo:lo + p.batch_size], ys[lo:lo + p.batch_size], index=j + 1)
            for j, lo in enumerate(range(0, p.total_n, p.batch_size))]
