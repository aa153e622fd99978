"""Trace data model, CSV ingestion, resampling, splits, and CV folds.

A trace is a uniformly sampled record of the board state: the two cluster
frequencies, the eight per-core utilizations, and the measured package
temperature. Cores 1-4 belong to the little cluster, cores 5-8 to the big
cluster. All operations here are pure; Trace instances are immutable and
safe to share across workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    KTooLarge,
    MissingColumn,
    NonMonotoneTime,
    OutOfRangeValue,
    TooShort,
    UpsampleUnsupported,
)

N_CORES = 8

CSV_HEADER = (
    "t_s",
    "f_big_mhz",
    "f_little_mhz",
    "u1",
    "u2",
    "u3",
    "u4",
    "u5",
    "u6",
    "u7",
    "u8",
    "temp_c",
)

F_BIG_MHZ_RANGE = (200.0, 2000.0)
F_LITTLE_MHZ_RANGE = (200.0, 1500.0)

# Timestamps must sit on the uniform grid within this tolerance.
TIME_TOL_S = 1e-6


@dataclass(frozen=True)
class Sample:
    """One row of a trace."""

    t: float
    f_big: float
    f_little: float
    u: tuple[float, ...]
    temp: float


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Trace:
    """A uniformly sampled board-state record (struct of arrays).

    Fields:
        t: timestamps in seconds, shape (T,), strictly increasing, uniform.
        f_big: big-cluster frequency in MHz, shape (T,).
        f_little: little-cluster frequency in MHz, shape (T,).
        util: per-core utilization in [0, 1], shape (T, 8).
        temp: measured temperature in deg C, shape (T,).
        rate_hz: sample rate; spacing is 1/rate_hz within 1e-6 s.
    """

    t: np.ndarray
    f_big: np.ndarray
    f_little: np.ndarray
    util: np.ndarray
    temp: np.ndarray
    rate_hz: float

    def __post_init__(self) -> None:
        for name in ("t", "f_big", "f_little", "util", "temp"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        n = self.t.shape[0]
        if n == 0:
            raise TooShort("trace must contain at least one sample")
        if self.util.shape != (n, N_CORES):
            raise OutOfRangeValue(
                f"util must have shape ({n}, {N_CORES}), got {self.util.shape}"
            )
        for name in ("f_big", "f_little", "temp"):
            if getattr(self, name).shape != (n,):
                raise OutOfRangeValue(f"{name} must have shape ({n},)")
        if self.rate_hz <= 0:
            raise OutOfRangeValue("rate_hz must be positive")
        if n > 1:
            dt = np.diff(self.t)
            if np.any(dt <= 0):
                i = int(np.argmax(dt <= 0))
                raise NonMonotoneTime(f"timestamps not strictly increasing at sample {i + 1}")
            if np.any(np.abs(dt - 1.0 / self.rate_hz) > TIME_TOL_S):
                i = int(np.argmax(np.abs(dt - 1.0 / self.rate_hz) > TIME_TOL_S))
                raise NonMonotoneTime(
                    f"spacing at sample {i + 1} deviates from 1/{self.rate_hz} Hz by more than {TIME_TOL_S} s"
                )
        self._check_ranges()

    def _check_ranges(self) -> None:
        checks = (
            ("f_big_mhz", self.f_big, F_BIG_MHZ_RANGE),
            ("f_little_mhz", self.f_little, F_LITTLE_MHZ_RANGE),
        )
        for name, arr, (lo, hi) in checks:
            bad = (arr < lo) | (arr > hi) | ~np.isfinite(arr)
            if np.any(bad):
                i = int(np.argmax(bad))
                raise OutOfRangeValue(
                    f"{name} = {arr[i]} at sample {i} outside [{lo}, {hi}]"
                )
        bad = (self.util < 0.0) | (self.util > 1.0) | ~np.isfinite(self.util)
        if np.any(bad):
            i, j = np.unravel_index(int(np.argmax(bad)), self.util.shape)
            raise OutOfRangeValue(
                f"u{j + 1} = {self.util[i, j]} at sample {i} outside [0, 1]"
            )
        if np.any(~np.isfinite(self.temp)):
            i = int(np.argmax(~np.isfinite(self.temp)))
            raise OutOfRangeValue(f"temp_c not finite at sample {i}")

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def sample(self, i: int) -> Sample:
        return Sample(
            t=float(self.t[i]),
            f_big=float(self.f_big[i]),
            f_little=float(self.f_little[i]),
            u=tuple(float(x) for x in self.util[i]),
            temp=float(self.temp[i]),
        )

    def slice(self, start: int, stop: int) -> "Trace":
        """Contiguous sub-trace over sample indices [start, stop)."""
        return Trace(
            t=self.t[start:stop],
            f_big=self.f_big[start:stop],
            f_little=self.f_little[start:stop],
            util=self.util[start:stop],
            temp=self.temp[start:stop],
            rate_hz=self.rate_hz,
        )

    def base_matrix(self) -> np.ndarray:
        """The 10 base regressors as columns: f_big, f_little, u1..u8 (raw units)."""
        return np.column_stack([self.f_big, self.f_little, self.util])

    def duration_s(self) -> float:
        return float(len(self) / self.rate_hz)


@dataclass(frozen=True)
class DataSplit:
    """Contiguous development / guard-gap / test partition of one trace."""

    dev: Trace
    gap: Trace
    test: Trace
    fractions: tuple[float, float, float] = (0.79, 0.01, 0.20)


@dataclass(frozen=True)
class Fold:
    """One cross-validation fold: a contiguous validation block within dev."""

    val_start: int
    val_stop: int
    n: int

    @property
    def train_ranges(self) -> tuple[tuple[int, int], ...]:
        ranges = []
        if self.val_start > 0:
            ranges.append((0, self.val_start))
        if self.val_stop < self.n:
            ranges.append((self.val_stop, self.n))
        return tuple(ranges)

    def train_indices(self) -> np.ndarray:
        return np.concatenate(
            [np.arange(a, b) for a, b in self.train_ranges]
            or [np.empty(0, dtype=int)]
        )

    def val_indices(self) -> np.ndarray:
        return np.arange(self.val_start, self.val_stop)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    n: int
    folds: tuple[Fold, ...]


def load_csv(path: str | Path) -> Trace:
    """Parse a trace CSV (schema `t_s,f_big_mhz,f_little_mhz,u1..u8,temp_c`).

    The sample rate is inferred from the median timestamp delta. Raises
    MissingColumn on a bad header, NonMonotoneTime on disordered or
    non-uniform timestamps, and OutOfRangeValue naming the offending row.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(f"{path}: empty file") from None
        header = tuple(h.strip() for h in header)
        if header != CSV_HEADER:
            missing = [c for c in CSV_HEADER if c not in header]
            if missing:
                raise MissingColumn(f"{path}: missing columns {missing}")
            raise MissingColumn(
                f"{path}: header {header} does not match {CSV_HEADER}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise MissingColumn(
                    f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}"
                )
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise OutOfRangeValue(f"{path}:{lineno}: unparseable value ({exc})") from None
    if len(rows) < 2:
        raise TooShort(f"{path}: need at least 2 samples to infer the rate")
    data = np.asarray(rows, dtype=np.float64)
    dt = np.diff(data[:, 0])
    if np.any(dt <= 0):
        i = int(np.argmax(dt <= 0))
        raise NonMonotoneTime(f"{path}: timestamps not strictly increasing at line {i + 3}")
    rate = 1.0 / float(np.median(dt))
    return Trace(
        t=data[:, 0],
        f_big=data[:, 1],
        f_little=data[:, 2],
        util=data[:, 3:11],
        temp=data[:, 11],
        rate_hz=rate,
    )


def save_csv(trace: Trace, path: str | Path) -> None:
    """Write a trace using the external CSV schema; floats use repr round-trip."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for i in range(len(trace)):
            vals = [
                trace.t[i],
                trace.f_big[i],
                trace.f_little[i],
                *trace.util[i],
                trace.temp[i],
            ]
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")


def concat(parts: Sequence[Trace]) -> Trace:
    """Concatenate contiguous traces (inverse of split for adjacent pieces)."""
    parts = [p for p in parts if len(p) > 0]
    if not parts:
        raise TooShort("nothing to concatenate")
    rate = parts[0].rate_hz
    return Trace(
        t=np.concatenate([p.t for p in parts]),
        f_big=np.concatenate([p.f_big for p in parts]),
        f_little=np.concatenate([p.f_little for p in parts]),
        util=np.concatenate([p.util for p in parts]),
        temp=np.concatenate([p.temp for p in parts]),
        rate_hz=rate,
    )


def resample(trace: Trace, target_hz: float) -> Trace:
    """Downsample by arithmetic window means to a uniform target rate.

    Output sample k averages the source samples whose time falls in
    [t0 + k/target_hz, t0 + (k+1)/target_hz); a trailing incomplete window
    is dropped. target_hz must not exceed the source rate.
    """
    if target_hz > trace.rate_hz * (1.0 + 1e-12):
        raise UpsampleUnsupported(
            f"target {target_hz} Hz exceeds source rate {trace.rate_hz} Hz"
        )
    if abs(target_hz - trace.rate_hz) <= 1e-12 * trace.rate_hz:
        return trace
    ratio = trace.rate_hz / target_hz
    n_out = int(np.floor(len(trace) / ratio + 1e-9))
    if n_out == 0:
        raise TooShort(
            f"trace too short ({len(trace)} samples) for one window at {target_hz} Hz"
        )
    # Window start indices on the source grid.
    starts = np.ceil(np.arange(n_out) * ratio - 1e-9).astype(int)
    stops = np.ceil((np.arange(n_out) + 1) * ratio - 1e-9).astype(int)
    counts = (stops - starts).astype(np.float64)

    def wmean(a: np.ndarray) -> np.ndarray:
        sums = np.add.reduceat(a, starts, axis=0)
        # reduceat's final segment runs to the end of the array; trim it when a
        # trailing partial window was dropped.
        if stops[-1] < a.shape[0]:
            sums[-1] = a[starts[-1] : stops[-1]].sum(axis=0)
        if a.ndim == 1:
            return sums / counts
        return sums / counts[:, None]

    t0 = float(trace.t[0])
    return Trace(
        t=t0 + np.arange(n_out) / target_hz,
        f_big=wmean(trace.f_big),
        f_little=wmean(trace.f_little),
        util=wmean(trace.util),
        temp=wmean(trace.temp),
        rate_hz=target_hz,
    )


def split(trace: Trace) -> DataSplit:
    """Partition a trace into contiguous dev (79%), gap (1%), test (20%).

    The dev count is floor(0.79 T) and the test count round(0.20 T); the gap
    absorbs the remainder so dev and test stay within one sample of their
    nominal fractions. The gap is discarded by downstream protocols.
    """
    n = len(trace)
    if n < 100:
        raise TooShort(f"need at least 100 samples to split, got {n}")
    n_dev = int(np.floor(0.79 * n))
    n_test = int(round(0.20 * n))
    n_gap = n - n_dev - n_test
    return DataSplit(
        dev=trace.slice(0, n_dev),
        gap=trace.slice(n_dev, n_dev + n_gap),
        test=trace.slice(n_dev + n_gap, n),
    )


def make_folds(dev: Trace | int, k: int) -> FoldPlan:
    """Contiguous k-fold plan over the dev set.

    Validation blocks are consecutive index ranges of size |dev|/k (+-1) that
    tile dev; fold j trains on dev minus block j. Contiguous blocks (rather
    than shuffled rows) avoid leakage across autocorrelated samples.
    """
    n = dev if isinstance(dev, int) else len(dev)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n:
        raise KTooLarge(f"k={k} exceeds dev length {n}")
    base, rem = divmod(n, k)
    folds = []
    start = 0
    for j in range(k):
        size = base + (1 if j < rem else 0)
        folds.append(Fold(val_start=start, val_stop=start + size, n=n))
        start += size
    return FoldPlan(k=k, n=n, folds=tuple(folds))


def train_chunks(trace: Trace, fold: Fold) -> list[Trace]:
    """The contiguous training sub-traces of one fold."""
    return [trace.slice(a, b) for a, b in fold.train_ranges]
