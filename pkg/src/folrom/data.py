"""Segmented trajectory storage, delay embedding, PCA and CSV ingestion."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .basis import FunctionLibrary, eval_library, pair_indices


class ParseError(ValueError):
    """Malformed CSV input; ``row`` is the 1-based data row (header excluded)."""

    def __init__(self, msg, row=None):
        super().__init__(msg if row is None else f"row {row}: {msg}")
        self.row = row


@dataclass(frozen=True)
class TrajectorySet:
    """Observations x_k with forcing values theta_k, cut into segments.

    Segment ``j`` occupies rows ``boundaries[j]:boundaries[j+1]``.
    ``forcing`` has shape (n, d_Y); autonomous data uses d_Y = 0.
    """

    states: np.ndarray
    forcing: np.ndarray
    boundaries: np.ndarray
    dt: float = 1.0
    translated: bool = False
    times: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.asarray(self.states, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        th = np.asarray(self.forcing, dtype=float)
        if th.ndim == 1:
            th = th[:, None] if th.size else np.zeros((len(x), 0))
        b = np.asarray(self.boundaries, dtype=int)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "forcing", th)
        object.__setattr__(self, "boundaries", b)
        if th.shape[0] != x.shape[0]:
            raise ValueError("forcing and states must have the same number of rows")
        if b[0] != 0 or b[-1] != len(x) or np.any(np.diff(b) < 2):
            raise ValueError("boundaries must start at 0, end at the sample count, "
                             "and every segment needs at least 2 samples")
        if self.times is not None:
            object.__setattr__(self, "times", np.asarray(self.times, dtype=float))

    @property
    def n_samples(self):
        return self.states.shape[0]

    @property
    def d_X(self):
        return self.states.shape[1]

    @property
    def d_Y(self):
        return self.forcing.shape[1]

    @property
    def n_segments(self):
        return len(self.boundaries) - 1

    def segment(self, j):
        return slice(self.boundaries[j], self.boundaries[j + 1])

    def segments(self):
        for j in range(self.n_segments):
            s = self.segment(j)
            yield self.states[s], self.forcing[s]

    def pairs(self):
        """Indices k with (k, k+1) inside one segment."""
        return pair_indices(self.boundaries)

    def alphas(self, lib: FunctionLibrary):
        """Library evaluated at every forcing value."""
        if lib.n_Y == 1 and self.d_Y == 0:
            return np.ones((self.n_samples, 1))
        th = self.forcing if lib.dim > 1 else self.forcing[:, 0]
        return eval_library(lib, th)

    def select(self, segs):
        """New set holding only the listed segments."""
        segs = list(segs)
        idx = np.concatenate([np.arange(self.boundaries[j], self.boundaries[j + 1]) for j in segs])
        lens = [self.boundaries[j + 1] - self.boundaries[j] for j in segs]
        t = None if self.times is None else self.times[idx]
        return replace(self, states=self.states[idx], forcing=self.forcing[idx],
                       boundaries=np.concatenate([[0], np.cumsum(lens)]), times=t)

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        lens = np.concatenate([np.diff(s.boundaries) for s in sets])
        times = None if any(s.times is None for s in sets) else np.concatenate([s.times for s in sets])
        return cls(np.vstack([s.states for s in sets]), np.vstack([s.forcing for s in sets]),
                   np.concatenate([[0], np.cumsum(lens)]), sets[0].dt, sets[0].translated, times)


def delay_embed(raw: TrajectorySet, d: int) -> TrajectorySet:
    """Stack d consecutive samples; the newest sample's forcing is kept."""
    if d < 1:
        raise ValueError("delay length must be positive")
    xs, ths, lens, ts = [], [], [], []
    for j in range(raw.n_segments):
        s = raw.segment(j)
        x, th = raw.states[s], raw.forcing[s]
        n = len(x) - d + 1
        if n < 2:
            raise ValueError(f"segment {j} has {len(x)} samples, too short for delay length {d}")
        xs.append(np.hstack([x[i:i + n] for i in range(d)]))
        ths.append(th[d - 1:])
        lens.append(n)
        if raw.times is not None:
            ts.append(raw.times[s][d - 1:])
    return TrajectorySet(np.vstack(xs), np.vstack(ths), np.concatenate([[0], np.cumsum(lens)]),
                         raw.dt, raw.translated, np.concatenate(ts) if ts else None)


def pca_reduce(data: TrajectorySet, m: int, center: bool = False):
    """Project onto the m leading left singular vectors of X (columns are samples).

    Returns the reduced set and ``U_r`` with orthonormal columns. No
    centring is applied unless ``center`` is set.
    """
    X = data.states.T
    if m > X.shape[0]:
        raise ValueError(f"cannot keep {m} modes of a {X.shape[0]}-dimensional state")
    if center:
        X = X - X.mean(axis=1, keepdims=True)
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0
    if m > rank:
        warnings.warn(f"keeping {m} modes but data rank is {rank}; trailing modes carry no variance")
    Ur = U[:, :m]
    return replace(data, states=data.states @ Ur), Ur


def _steady_values(steady, lib, data):
    s = np.asarray(steady, dtype=float)
    return data.alphas(lib) @ s.T


def translate(data: TrajectorySet, steady, lib: FunctionLibrary) -> TrajectorySet:
    """x_hat = x - s(theta) with s(theta) = steady @ Psi(theta)."""
    if data.translated:
        raise ValueError("data is already translated")
    return replace(data, states=data.states - _steady_values(steady, lib, data), translated=True)


def untranslate(data: TrajectorySet, steady, lib: FunctionLibrary) -> TrajectorySet:
    if not data.translated:
        raise ValueError("data is not translated")
    return replace(data, states=data.states + _steady_values(steady, lib, data), translated=False)


@dataclass(frozen=True)
class CsvSchema:
    """Column roles of a trajectory CSV file.

    Defaults follow the ``seg, t, x1..xd, theta1..`` layout; state and
    forcing columns are auto-detected from the header when left empty.
    """

    dt: float | None = None
    state_columns: tuple[str, ...] = ()
    forcing_columns: tuple[str, ...] = ()
    segment_column: str = "seg"
    time_column: str | None = "t"
    dt_rtol: float = 1e-9


def _numbered(header, prefix):
    cols = [c for c in header if c.startswith(prefix) and c[len(prefix):].isdigit()]
    return tuple(sorted(cols, key=lambda c: int(c[len(prefix):])))


def read_table(path, columns=None, header_hook=None, allow_nan=False):
    """Read a numeric CSV file into a dict of float columns.

    ``columns`` lists the required columns (default: all); ``header_hook``
    may map the header to that list. Errors carry 1-based data-row numbers.
    Infinite cells are always rejected, NaN cells unless ``allow_nan``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file") from None
        need = list(header_hook(header) if header_hook else (columns or header))
        missing = [c for c in need if c not in header]
        if missing:
            raise ParseError(f"missing columns {missing}")
        pos = {c: header.index(c) for c in need}
        out = {c: [] for c in need}
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, found {len(row)}", r)
            for c in need:
                cell = row[pos[c]].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell!r} in column {c!r}", r) from None
                if not math.isfinite(v) and not (allow_nan and math.isnan(v)):
                    raise ParseError(f"non-finite cell {cell!r} in column {c!r}", r)
                out[c].append(v)
    if not need or not out[need[0]]:
        raise ParseError("no data rows")
    return {c: np.asarray(v, dtype=float) for c, v in out.items()}


def ingest_csv(path, schema: CsvSchema = CsvSchema()) -> TrajectorySet:
    """Read a trajectory CSV. Segments are contiguous runs of equal segment id."""
    roles = {}

    def hook(header):
        roles["x"] = schema.state_columns or _numbered(header, "x")
        roles["theta"] = schema.forcing_columns or _numbered(header, "theta")
        need = [schema.segment_column, *roles["x"], *roles["theta"]]
        if schema.time_column:
            need.append(schema.time_column)
        missing = [c for c in need if c not in header]
        if missing:
            raise ParseError(f"missing columns {missing}")
        if not roles["x"]:
            raise ParseError("no state columns")
        return need

    cols = read_table(path, header_hook=hook)
    xcols, tcols = roles["x"], roles["theta"]
    segs = cols[schema.segment_column]
    n = len(segs)
    change = np.flatnonzero(np.diff(segs) != 0) + 1
    bounds = np.concatenate([[0], change, [n]])
    lens = np.diff(bounds)
    short = np.flatnonzero(lens < 2)
    if short.size:
        j = short[0]
        raise ParseError(f"segment {segs[bounds[j]]:g} has fewer than 2 rows", int(bounds[j]) + 1)
    times = cols[schema.time_column] if schema.time_column else None
    dt = schema.dt
    if times is not None:
        steps = np.concatenate([np.diff(times[bounds[j]:bounds[j + 1]]) for j in range(len(lens))])
        if dt is None:
            dt = float(np.median(steps))
        bad = np.flatnonzero(np.abs(steps - dt) > schema.dt_rtol * abs(dt))
        if bad.size:
            raise ParseError(f"time step {steps[bad[0]]!r} disagrees with dt={dt!r}")
    if dt is None:
        raise ParseError("dt not given and no time column")
    xs = np.column_stack([cols[c] for c in xcols])
    th = np.column_stack([cols[c] for c in tcols]) if tcols else np.zeros((n, 0))
    return TrajectorySet(xs, th, bounds, float(dt), False, times)


def write_table(path, columns: dict):
    """Write equal-length float columns with round-trip precision."""
    names = list(columns)
    arrs = [np.asarray(columns[c], dtype=float) for c in names]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for k in range(len(arrs[0]) if arrs else 0):
            w.writerow([repr(float(a[k])) for a in arrs])


def export_csv(data: TrajectorySet, path):
    """Write a set in the ``seg, t, x1.., theta1..`` layout with round-trip precision."""
    n = data.n_samples
    seg = np.repeat(np.arange(data.n_segments), np.diff(data.boundaries))
    if data.times is not None:
        t = data.times
    else:
        t = np.concatenate([np.arange(l) * data.dt for l in np.diff(data.boundaries)])
    header = ["seg", "t"] + [f"x{i + 1}" for i in range(data.d_X)] + [f"theta{i + 1}" for i in range(data.d_Y)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(n):
            w.writerow([str(seg[k]), repr(float(t[k]))]
                       + [repr(float(v)) for v in data.states[k]]
                       + [repr(float(v)) for v in data.forcing[k]])
