"""Integrated squared error and the Monte-Carlo experiment runner."""

import csv
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baseline import (as_grid_estimate, nml_batch_average, nml_full, nw_batch_average,
                       nw_full, spline_batch_average, spline_full)
from .data import PooledDataset
from .errors import ConfigError, EmptyEstimateError, InsufficientDataError
from .estfun import get_estfun
from .kernel import GAUSSIAN, RATE_EXPONENT, default_cv_grid, select_cv_constant
from .renew import EvaluationGrid, GridEstimate, RenewableState, update_closed_form, update_newton
from .simgen import StreamPlan, generate_points, generate_stream, get_model
from .spline import SplineBasis, SplineState, basis_eval, select_knot_count, solve_spline, update_spline

log = logging.getLogger(__name__)

ESTIMATORS = ("NWE_f", "NWE_a", "RWS_hf", "RWS_hk", "NML_f", "NML_a",
              "CSP_f", "CSP_a", "RWS_knf", "RWS_kn1")
_KERNEL_MEAN_ONLY = {"NWE_f", "NWE_a"}
_SPLINE = {"CSP_f", "CSP_a", "RWS_knf", "RWS_kn1"}
_POOLED = {"NWE_f", "NML_f", "CSP_f"}

COMPONENT_NAMES = {"homo": ("mean",), "hetero": ("mean", "variance"), "gamma": ("shape",)}

DESIGNS = ("fixed-n", "fixed-batch")

RESULTS_HEADER = ("model", "design", "n", "batch_size", "estimator", "component",
                  "replications", "mise", "coverage", "wall_ms")

# Leave-one-out CV cost grows quadratically in the window; beyond this many
# points the constant is fitted on a prefix and carried over through the
# n^(-1/5) scaling.
CV_MAX_POINTS = 12000

# --------------------------------------------------------------------------
# integrated squared error
# --------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


def _segments(mask):
    """Start/stop index pairs of the runs of True in ``mask``."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return edges[0::2], edges[1::2]


def integrated_squared_error(estimate, truth, component=0, rule="trapezoid"):
    """Squared error integrated over the defined interior, with coverage.

    Parameters
    ----------
    estimate : GridEstimate
    truth : callable
        Maps an array of x to an array of shape ``(len(x), dim)`` (or 1-d).
    component : int
    rule : {"trapezoid", "interpolant"}
        ``trapezoid`` applies the trapezoid rule to the squared error at the
        grid points.  ``interpolant`` integrates the squared difference between
        the piecewise-linear interpolant of the estimate and ``truth`` with
        five-point Gauss-Legendre on every grid cell.

    Returns
    -------
    ise : float
        Integral divided by the total length of the covered cells.
    coverage : float
        Fraction of interior grid points where the estimate is defined.

    Raises
    ------
    EmptyEstimateError
        If no interior grid point is defined.
    """
    grid = estimate.grid
    interior = grid.interior_mask
    mask = interior & np.asarray(estimate.defined, dtype=bool)
    coverage = float(mask.sum() / interior.sum())
    if not mask.any():
        raise EmptyEstimateError("estimate is undefined on the whole interior")
    pts = grid.points
    vals = np.asarray(estimate.values, dtype=np.float64)
    vals = vals[:, component] if vals.ndim == 2 else vals

    def true_at(x):
        t = np.asarray(truth(x), dtype=np.float64)
        return t[:, component] if t.ndim == 2 else t

    starts, stops = _segments(mask)
    total = 0.0
    length = 0.0
    for lo, hi in zip(starts, stops):
        if hi - lo < 2:
            continue
        x = pts[lo:hi]
        v = vals[lo:hi]
        if rule == "trapezoid":
            err = (v - true_at(x)) ** 2
            total += float(np.sum(0.5 * (err[1:] + err[:-1]) * np.diff(x)))
        elif rule == "interpolant":
            half = 0.5 * np.diff(x)
            mid = 0.5 * (x[1:] + x[:-1])
            xq = mid[:, None] + half[:, None] * _GL_NODES[None, :]
            frac = (xq - x[:-1, None]) / np.diff(x)[:, None]
            lin = v[:-1, None] + frac * (v[1:] - v[:-1])[:, None]
            err = (lin - true_at(xq.ravel()).reshape(xq.shape)) ** 2
            total += float(np.sum(half * (err @ _GL_WEIGHTS)))
        else:
            raise ValueError(f"unknown rule {rule!r}")
        length += x[-1] - x[0]
    if length == 0.0:
        # only isolated defined points: fall back to their mean squared error
        sel = np.flatnonzero(mask)
        return float(np.mean((vals[sel] - true_at(pts[sel])) ** 2)), coverage
    return total / length, coverage


def mise(estimate, truth, grid=None, component=0, rule="trapezoid"):
    """Integrated squared error of one replication (see :func:`integrated_squared_error`).

    ``estimate`` may be a :class:`GridEstimate` or a plain vector of values on
    ``grid``; NaN entries of a plain vector count as undefined.
    """
    if not isinstance(estimate, GridEstimate):
        if grid is None:
            raise ValueError("grid is required when estimate is a plain vector")
        vals = np.asarray(estimate, dtype=np.float64)
        vals = vals[:, None] if vals.ndim == 1 else vals
        estimate = GridEstimate(grid, vals, np.all(np.isfinite(vals), axis=1))
    return integrated_squared_error(estimate, truth, component, rule)[0]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def canonical_estimator(name):
    """Map ``nwe-f``, ``nwe_f``, ``NWE_f`` ... to the canonical identifier."""
    key = str(name).strip().replace("-", "_").lower()
    for est in ESTIMATORS:
        if est.lower() == key:
            return est
    raise ConfigError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATORS)}")


def check_compatible(model_name, estimators):
    for est in estimators:
        if model_name == "gamma" and (est in _KERNEL_MEAN_ONLY or est in _SPLINE):
            raise ConfigError(f"estimator {est} does not apply to the gamma model")


def _as_int_list(key, value):
    vals = value if isinstance(value, list) else [value]
    if not vals:
        raise ConfigError(f"{key}: list must not be empty")
    out = []
    for v in vals:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{key}: expected integers, got {v!r}")
        if v < 1:
            raise ConfigError(f"{key}: values must be >= 1, got {v}")
        out.append(v)
    return tuple(out)


@dataclass(frozen=True)
class ExperimentConfig:
    """A simulation design: model, design points, estimators and scoring grid."""

    model: str
    design: str
    n_values: tuple
    batch_values: tuple
    replications: int = 20
    estimators: tuple = ("NWE_f", "NWE_a", "RWS_hf", "RWS_hk")
    seed: int = 20240101
    grid_points: int = 401
    trim: float = 0.05
    cv_grid: tuple = field(default_factory=lambda: tuple(default_cv_grid()))
    cv_max_points: int = CV_MAX_POINTS
    timing: bool = False

    KEYS = ("model", "design", "n", "batch_size", "replications", "estimators", "seed",
            "grid_points", "trim", "cv_grid", "cv_range", "cv_max_points", "timing")

    def __post_init__(self):
        try:
            get_model(self.model)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        if self.design not in DESIGNS:
            raise ConfigError(f"design: expected one of {DESIGNS}, got {self.design!r}")
        if not self.n_values:
            raise ConfigError("n: list must not be empty")
        if not self.batch_values:
            raise ConfigError("batch_size: list must not be empty")
        if self.design == "fixed-n" and len(self.n_values) != 1:
            raise ConfigError("n: the fixed-n design takes exactly one n")
        if self.design == "fixed-batch" and len(self.batch_values) != 1:
            raise ConfigError("batch_size: the fixed-batch design takes exactly one batch size")
        if self.replications < 1:
            raise ConfigError(f"replications: must be >= 1, got {self.replications}")
        if not self.estimators:
            raise ConfigError("estimators: list must not be empty")
        ests = tuple(canonical_estimator(e) for e in self.estimators)
        if len(set(ests)) != len(ests):
            raise ConfigError("estimators: duplicate entries")
        object.__setattr__(self, "estimators", ests)
        check_compatible(self.model, ests)
        if self.grid_points < 2:
            raise ConfigError("grid_points: need at least 2")
        if not 0.0 <= self.trim < 0.5:
            raise ConfigError(f"trim: must lie in [0, 0.5), got {self.trim}")
        if not self.cv_grid or any(not (c > 0 and math.isfinite(c)) for c in self.cv_grid):
            raise ConfigError("cv_grid: needs positive finite constants")
        if self.cv_max_points < 10:
            raise ConfigError("cv_max_points: must be >= 10")
        if self.seed < 0:
            raise ConfigError("seed: must be non-negative")
        needs_first_batch_cv = {"RWS_hk", "RWS_kn1"} & set(ests)
        if needs_first_batch_cv and min(self.batch_values) < 10:
            raise ConfigError("batch_size: first-batch cross-validation needs at least 10 points")

    @property
    def model_spec(self):
        return get_model(self.model)

    @property
    def components(self):
        return COMPONENT_NAMES[self.model]

    def grid(self):
        a, b = self.model_spec.support
        return EvaluationGrid.uniform(a, b, self.grid_points, self.trim)

    @classmethod
    def from_mapping(cls, raw):
        unknown = sorted(set(raw) - set(cls.KEYS))
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        for key in ("model", "design", "n", "batch_size"):
            if key not in raw:
                raise ConfigError(f"missing required key {key!r}")
        kw = {"model": raw["model"], "design": raw["design"],
              "n_values": _as_int_list("n", raw["n"]),
              "batch_values": _as_int_list("batch_size", raw["batch_size"])}
        for key in ("replications", "seed", "grid_points", "cv_max_points"):
            if key in raw:
                v = raw[key]
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{key}: expected an integer, got {v!r}")
                kw[key] = v
        if "trim" in raw:
            if not isinstance(raw["trim"], (int, float)) or isinstance(raw["trim"], bool):
                raise ConfigError(f"trim: expected a number, got {raw['trim']!r}")
            kw["trim"] = float(raw["trim"])
        if "estimators" in raw:
            if not isinstance(raw["estimators"], list):
                raise ConfigError("estimators: expected a list of names")
            kw["estimators"] = tuple(raw["estimators"])
        if "cv_grid" in raw and "cv_range" in raw:
            raise ConfigError("cv_range: give either cv_grid or cv_range, not both")
        if "cv_grid" in raw:
            try:
                kw["cv_grid"] = tuple(float(c) for c in raw["cv_grid"])
            except (TypeError, ValueError):
                raise ConfigError("cv_grid: expected a list of numbers") from None
        if "cv_range" in raw:
            rng = raw["cv_range"]
            ok = (isinstance(rng, list) and len(rng) == 2
                  and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in rng))
            if not ok or not 0 < rng[0] < rng[1]:
                raise ConfigError("cv_range: expected [low, high] with 0 < low < high")
            kw["cv_grid"] = tuple(default_cv_grid(float(rng[0]), float(rng[1])))
        if "timing" in raw:
            if not isinstance(raw["timing"], bool):
                raise ConfigError("timing: expected true or false")
            kw["timing"] = raw["timing"]
        return cls(**kw)

    @classmethod
    def from_toml(cls, path):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_mapping(raw)


# --------------------------------------------------------------------------
# runner
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MiseRow:
    model: str
    design: str
    n: int
    batch_size: int
    estimator: str
    component: str
    replications: int
    mise: float
    coverage: float
    wall_ms: float
    ises: tuple = field(default=(), repr=False, compare=False)


def _fit_cv_constant(xs, ys, cfg):
    m = min(xs.size, cfg.cv_max_points)
    return select_cv_constant(PooledDataset(xs[:m], ys[:m]), GAUSSIAN, cfg.cv_grid)


def _spline_estimate(grid, basis, coef):
    return as_grid_estimate(grid, basis_eval(basis, grid.points) @ coef)


def _stream_kernel(batches, hs, grid, dim, f, closed):
    state = RenewableState.fresh(grid, dim)
    for b, h in zip(batches, hs):
        if closed:
            state = update_closed_form(state, b, h, GAUSSIAN)
        else:
            state = update_newton(state, b, h, GAUSSIAN, f)
    if state.nonconverged:
        log.warning("streamed fit: %d grid-point solves did not converge", state.nonconverged)
    return state.as_estimate()


def _stream_spline(batches, basis, grid):
    state = SplineState.fresh(basis)
    for b in batches:
        state = update_spline(state, b)
    return _spline_estimate(grid, basis, solve_spline(state))


def _first_batch_basis(batch):
    lo, hi = float(batch.xs.min()), float(batch.xs.max())
    count = select_knot_count(batch.xs, batch.ys, a=lo, b=hi)
    return SplineBasis.equidistant(lo, hi, count)


def _replicate(cfg, n, rep):
    """Every estimator's ISE for one (n, replication), over all batch sizes."""
    m = cfg.model_spec
    grid = cfg.grid()
    f = get_estfun(m.estfun)
    mean_model = cfg.model == "homo"
    ests = set(cfg.estimators)
    xs, ys = generate_points(m, cfg.seed, rep, 0, n)
    pooled = PooledDataset(xs, ys)
    out = {}

    def timed(fn):
        t0 = time.perf_counter()
        val = fn()
        return val, (time.perf_counter() - t0) * 1e3

    def kernel_fit(data, h):
        if mean_model:
            return nw_full(data, h, GAUSSIAN, grid)
        return nml_full(data, h, GAUSSIAN, f, grid)

    shared = {}
    c_f = None
    if ests - _SPLINE - {"RWS_hk"}:
        c_f, ms = timed(lambda: _fit_cv_constant(xs, ys, cfg))
        shared["cv"] = ms
        h_f = c_f * float(n) ** RATE_EXPONENT
    if "NWE_f" in ests:
        shared["NWE_f"] = timed(lambda: kernel_fit(pooled, h_f))
    if "NML_f" in ests:
        shared["NML_f"] = timed(lambda: nml_full(pooled, h_f, GAUSSIAN, f, grid))
    csp_basis = None
    if ests & {"CSP_f", "CSP_a", "RWS_knf"}:
        def fit_csp():
            cut = min(n, cfg.cv_max_points)
            lo, hi = float(xs.min()), float(xs.max())
            count = select_knot_count(xs[:cut], ys[:cut], a=lo, b=hi)
            basis = SplineBasis.equidistant(lo, hi, count)
            return basis, spline_full(pooled, basis)
        (csp_basis, csp_coef), ms = timed(fit_csp)
        if "CSP_f" in ests:
            shared["CSP_f"] = (_spline_estimate(grid, csp_basis, csp_coef), ms)

    for bsize in cfg.batch_values:
        batches = generate_stream(m, StreamPlan(n, bsize, cfg.seed, rep))
        cum = np.cumsum([len(b) for b in batches])
        fits = {}
        for est in cfg.estimators:
            if est in _POOLED:
                fits[est] = shared[est]
            elif est == "RWS_hf":
                fits[est] = timed(lambda: _stream_kernel(
                    batches, [h_f] * len(batches), grid, m.dim, f, mean_model))
            elif est == "RWS_hk":
                def fit_hk():
                    c_1 = select_cv_constant(batches[0], GAUSSIAN, cfg.cv_grid)
                    hs = c_1 * cum.astype(np.float64) ** RATE_EXPONENT
                    return _stream_kernel(batches, hs, grid, m.dim, f, mean_model)
                fits[est] = timed(fit_hk)
            elif est in ("NWE_a", "NML_a"):
                hs = [c_f * float(len(b)) ** RATE_EXPONENT for b in batches]
                if est == "NWE_a" and mean_model:
                    fits[est] = timed(lambda: nw_batch_average(batches, hs, GAUSSIAN, grid))
                else:
                    fits[est] = timed(lambda: nml_batch_average(batches, hs, GAUSSIAN, f, grid))
            elif est == "CSP_a":
                fits[est] = timed(lambda: spline_batch_average(batches, csp_basis, grid))
            elif est == "RWS_knf":
                fits[est] = timed(lambda: _stream_spline(batches, csp_basis, grid))
            elif est == "RWS_kn1":
                fits[est] = timed(lambda: _stream_spline(
                    batches, _first_batch_basis(batches[0]), grid))
        for est, (estimate, ms) in fits.items():
            comps = ("mean",) if est in _SPLINE else cfg.components
            for ci, comp in enumerate(comps):
                try:
                    ise, cov = integrated_squared_error(estimate, m.true_fn, ci)
                except EmptyEstimateError:
                    log.warning("%s (n=%d, batch=%d, rep=%d) undefined on the interior",
                                est, n, bsize, rep)
                    ise, cov = math.nan, 0.0
                out[(bsize, est, comp)] = (ise, cov, ms)
        if mean_model and "RWS_hf" in fits and "NWE_f" in fits:
            a = out[(bsize, "RWS_hf", "mean")][0]
            b = out[(bsize, "NWE_f", "mean")][0]
            if not abs(a - b) <= 1e-10 * max(abs(b), 1e-300):
                raise AssertionError(
                    f"renewable and pooled N-W disagree: ISE {a!r} vs {b!r} (n={n}, rep={rep})")
    return out


def _design_points(cfg):
    return [(n, b) for n in cfg.n_values for b in cfg.batch_values]


def run_experiment(cfg, threads=1, progress=None):
    """Run every design point and replication of ``cfg``.

    Work is split into (n, replication) tasks spread over ``threads`` workers;
    results are gathered in task order, so the report does not depend on
    scheduling.

    Returns
    -------
    list of MiseRow
        One row per design point, estimator and estimate component.
    """
    tasks = [(n, rep) for n in cfg.n_values for rep in range(cfg.replications)]
    if threads <= 1:
        results = []
        for i, (n, rep) in enumerate(tasks):
            results.append(_replicate(cfg, n, rep))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: _replicate(cfg, *t), tasks))
    by_n = {}
    for (n, _rep), res in zip(tasks, results):
        by_n.setdefault(n, []).append(res)

    rows = []
    for n, b in _design_points(cfg):
        reps = by_n[n]
        for est in cfg.estimators:
            comps = ("mean",) if est in _SPLINE else cfg.components
            for comp in comps:
                vals = [r[(b, est, comp)] for r in reps]
                ises = tuple(v[0] for v in vals)
                ms = sum(v[2] for v in vals) / len(vals) if cfg.timing else 0.0
                rows.append(MiseRow(cfg.model, cfg.design, n, b, est, comp, len(vals),
                                    math.fsum(ises) / len(ises),
                                    math.fsum(v[1] for v in vals) / len(vals),
                                    ms, ises))
    return rows


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def results_csv(rows):
    """Render rows in the results CSV format (LF line endings)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in rows:
        w.writerow([_fmt(getattr(r, k)) for k in RESULTS_HEADER])
    return buf.getvalue()


def write_results_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(results_csv(rows))


def read_results_csv(path):
    """Parse a results CSV back into rows."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RESULTS_HEADER:
            raise ConfigError(f"{path}: not a results CSV (bad header)")
        rows = []
        for rec in reader:
            if not rec:
                continue
            if len(rec) != len(RESULTS_HEADER):
                raise ConfigError(f"{path}: line {reader.line_num}: expected "
                                  f"{len(RESULTS_HEADER)} fields")
            d = dict(zip(RESULTS_HEADER, rec))
            rows.append(MiseRow(d["model"], d["design"], int(d["n"]), int(d["batch_size"]),
                                d["estimator"], d["component"], int(d["replications"]),
                                float(d["mise"]), float(d["coverage"]), float(d["wall_ms"])))
    return rows


def summary_table(rows):
    """Human-readable summary, one line per row."""
    lines = []
    label = "ISE (1 replication)" if rows and rows[0].replications == 1 else "MISE"
    lines.append(f"{'n':>8} {'batch':>6} {'estimator':<9} {'component':<9} "
                 f"{label:>20} {'coverage':>9}")
    for r in rows:
        lines.append(f"{r.n:>8} {r.batch_size:>6} {r.estimator:<9} {r.component:<9} "
                     f"{r.mise:>20.4e} {r.coverage:>9.4f}")
    return "\n".join(lines)


def rate_check(rows, estimator=None, component=None):
    """Least-squares slope of log MISE against log n.

    ``rows`` may be :class:`MiseRow` objects (filtered by ``estimator`` and
    ``component``) or plain ``(n, mise)`` pairs.

    Raises
    ------
    InsufficientDataError
        Fewer than three distinct n values.
    """
    pairs = []
    for r in rows:
        if isinstance(r, MiseRow):
            if estimator is not None and r.estimator != estimator:
                continue
            if component is not None and r.component != component:
                continue
            pairs.append((r.n, r.mise))
        else:
            pairs.append((float(r[0]), float(r[1])))
    ns = np.array([p[0] for p in pairs], dtype=np.float64)
    ms = np.array([p[1] for p in pairs], dtype=np.float64)
    if np.unique(ns).size < 3:
        raise InsufficientDataError(f"rate check needs at least 3 distinct n values, got {np.unique(ns).size}")
    if np.any(ns <= 0) or np.any(~(ms > 0)):
        raise InsufficientDataError("rate check needs positive n and MISE values")
    if np.log10(ns.max() / ns.min()) < 2.0:
        log.warning("n values span less than two decades; the slope is poorly determined")
    slope, _ = np.polyfit(np.log(ns), np.log(ms), 1)
    return float(slope)
