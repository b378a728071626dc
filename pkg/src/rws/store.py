"""Binary snapshots of renewable state and the batch CSV format.

Snapshot layout (all integers little-endian)::

    b"RWS1" | version u32 | metadata length u32 | metadata (UTF-8 JSON)
    | payload arrays (raw little-endian, in metadata order) | checksum u64

The checksum is an 8-byte BLAKE2b digest of every byte before it.
"""

import hashlib
import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .data import Batch
from .errors import CorruptionError, DataError, InvalidBatchError, ParseError, VersionError
from .renew import EvaluationGrid, RenewableState
from .spline import SplineBasis, SplineState

MAGIC = b"RWS1"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sII")
_DTYPES = {"f8": np.dtype("<f8"), "u1": np.dtype("u1")}


@dataclass
class StateSnapshot:
    """A loaded snapshot: the state plus how it was produced."""

    state: object
    estimator: str = ""
    estfun: str = "mean"
    kernel: str = "gaussian"
    bandwidth: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    checksum: int = 0


def _digest(data):
    return hashlib.blake2b(data, digest_size=8).digest()


def _grid_meta(grid):
    return {"support": list(grid.support), "trim": grid.trim, "size": grid.size}


def _encode(state):
    """Metadata fields and named payload arrays for a state."""
    if isinstance(state, RenewableState):
        meta = {"kind": "kernel", "dim": state.dim, "grid": _grid_meta(state.grid),
                "batch_count": state.batch_count, "cumulative_n": state.cumulative_n,
                "nonconverged": state.nonconverged}
        arrays = [("points", state.grid.points), ("jsum", state.jsum),
                  ("estimate", state.estimate), ("defined", state.defined_mask)]
    elif isinstance(state, SplineState):
        b = state.basis
        meta = {"kind": "spline", "support": list(b.support), "center": b.center,
                "scale": b.scale, "batch_count": state.batch_count,
                "cumulative_n": state.cumulative_n}
        arrays = [("knots", b.knots), ("bmat", state.bmat), ("vvec", state.vvec),
                  ("bmat_err", state.bmat_err), ("vvec_err", state.vvec_err)]
    else:
        raise TypeError(f"cannot snapshot {type(state).__name__}")
    return meta, arrays


def save_state(state, path, estimator="", estfun="mean", kernel="gaussian", bandwidth=None):
    """Write ``state`` to ``path`` atomically (temporary file, then rename)."""
    meta, arrays = _encode(state)
    meta.update(estimator=estimator, estfun=estfun, kernel=kernel,
                bandwidth=dict(bandwidth or {}))
    blobs = []
    meta["arrays"] = []
    for name, arr in arrays:
        arr = np.asarray(arr)
        code = "u1" if arr.dtype == bool else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        meta["arrays"].append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(data)
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = _HEAD.pack(MAGIC, FORMAT_VERSION, len(text)) + text + b"".join(blobs)
    out = body + _digest(body)

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".rws-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(out)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse(raw):
    if len(raw) < _HEAD.size + 8:
        raise CorruptionError("file too short to be a snapshot")
    magic, version, mlen = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CorruptionError("bad magic bytes")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported snapshot version {version} (this build reads {FORMAT_VERSION})")
    body, stored = raw[:-8], raw[-8:]
    if _digest(body) != stored:
        raise CorruptionError("checksum mismatch")
    try:
        meta = json.loads(body[_HEAD.size:_HEAD.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptionError(f"unreadable metadata: {exc}") from None
    offset = _HEAD.size + mlen
    arrays = {}
    for spec in meta["arrays"]:
        dt = _DTYPES[spec["dtype"]]
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(body):
            raise CorruptionError("payload shorter than declared")
        arr = np.frombuffer(body, dtype=dt, count=count, offset=offset).reshape(spec["shape"])
        arrays[spec["name"]] = arr.astype(np.float64 if spec["dtype"] == "f8" else bool)
        offset += nbytes
    if offset != len(body):
        raise CorruptionError("trailing bytes after payload")
    return meta, arrays, int.from_bytes(stored, "little")


def load_state(path):
    """Read a snapshot written by :func:`save_state`.

    Raises
    ------
    CorruptionError
        Bad magic, checksum mismatch or malformed payload.
    VersionError
        The file declares a format version this build does not read.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    meta, arrays, checksum = _parse(raw)
    if meta["kind"] == "kernel":
        g = meta["grid"]
        grid = EvaluationGrid(arrays["points"], tuple(g["support"]), g["trim"])
        state = RenewableState(grid=grid, dim=meta["dim"], jsum=arrays["jsum"],
                               estimate=arrays["estimate"], defined_mask=arrays["defined"],
                               batch_count=meta["batch_count"],
                               cumulative_n=meta["cumulative_n"],
                               nonconverged=meta.get("nonconverged", 0))
    elif meta["kind"] == "spline":
        basis = SplineBasis(arrays["knots"], tuple(meta["support"]), meta["center"], meta["scale"])
        state = SplineState(basis, arrays["bmat"], arrays["vvec"],
                            meta["batch_count"], meta["cumulative_n"],
                            arrays["bmat_err"], arrays["vvec_err"])
    else:
        raise CorruptionError(f"unknown state kind {meta['kind']!r}")
    return StateSnapshot(state, meta.get("estimator", ""), meta.get("estfun", "mean"),
                         meta.get("kernel", "gaussian"), meta.get("bandwidth", {}),
                         FORMAT_VERSION, checksum)


def states_equal(a, b):
    """Field-by-field bit-exact comparison of two states."""
    if type(a) is not type(b):
        return False
    if isinstance(a, RenewableState):
        return (a.dim == b.dim and a.batch_count == b.batch_count
                and a.cumulative_n == b.cumulative_n
                and a.grid.support == b.grid.support and a.grid.trim == b.grid.trim
                and np.array_equal(a.grid.points, b.grid.points)
                and np.array_equal(a.jsum, b.jsum)
                and np.array_equal(a.estimate, b.estimate)
                and np.array_equal(a.defined_mask, b.defined_mask))
    return (a.batch_count == b.batch_count and a.cumulative_n == b.cumulative_n
            and a.basis.support == b.basis.support
            and a.basis.center == b.basis.center and a.basis.scale == b.basis.scale
            and np.array_equal(a.basis.knots, b.basis.knots)
            and np.array_equal(a.bmat, b.bmat) and np.array_equal(a.vvec, b.vvec)
            and np.array_equal(a.bmat_err, b.bmat_err)
            and np.array_equal(a.vvec_err, b.vvec_err))


# --------------------------------------------------------------------------
# batch CSV
# --------------------------------------------------------------------------

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_NONFINITE = re.compile(r"[+-]?(?:nan|inf|infinity)", re.IGNORECASE)


def _field(token, line):
    tok = token.strip()
    if _NUMBER.fullmatch(tok):
        return float(tok)
    if _NONFINITE.fullmatch(tok):
        raise DataError(f"non-finite value {tok!r}", line)
    raise ParseError(f"cannot parse {token!r} as a number", line)


def read_batch_csv(path, index=1):
    """Parse a ``x,y`` batch file.

    Raises
    ------
    ParseError
        Missing header or a malformed row (carries the 1-based line number).
    DataError
        A NaN or infinite value.
    InvalidBatchError
        No data rows.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"file is not UTF-8: {exc}", 1) from None
    if text.startswith("\ufeff"):
        text = text[1:]
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    lines = [ln[:-1] if ln.endswith("\r") else ln for ln in lines]
    if not lines or lines[0].replace(" ", "") != "x,y":
        raise ParseError("expected header 'x,y'", 1)
    xs = np.empty(len(lines) - 1)
    ys = np.empty(len(lines) - 1)
    for i, ln in enumerate(lines[1:]):
        lineno = i + 2
        parts = ln.split(",")
        if len(parts) != 2:
            raise ParseError(f"expected 2 fields, found {len(parts)}", lineno)
        xs[i] = _field(parts[0], lineno)
        ys[i] = _field(parts[1], lineno)
    if xs.size == 0:
        raise InvalidBatchError(f"{path}: no data rows")
    return Batch(xs, ys, index=index)


def format_batch_csv(batch):
    rows = ["x,y"]
    rows.extend(f"{x:.17g},{y:.17g}" for x, y in zip(batch.xs.tolist(), batch.ys.tolist()))
    return "\n".join(rows) + "\n"


def write_batch_csv(batch, path):
    """Write ``batch`` with 17 significant digits so every float survives the round trip."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_batch_csv(batch))
