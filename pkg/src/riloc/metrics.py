"""Localization error series, empirical CDFs and their pointwise median."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray


@dataclass(frozen=True)
class ErrorSeries:
    timestamps: NDArray[np.float64]
    errors: NDArray[np.float64]

    def __post_init__(self) -> None:
        t = np.asarray(self.timestamps, dtype=float)
        e = np.asarray(self.errors, dtype=float)
        if t.shape != e.shape or e.ndim != 1:
            raise ValueError("timestamps and errors must be 1-D arrays of equal length")
        if not np.all(np.isfinite(e)) or np.any(e < 0):
            raise ValueError("errors must be finite and non-negative")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "errors", e)

    def __len__(self) -> int:
        return self.errors.size

    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.errors**2)))


def interpolate_positions(
    t_query: ArrayLike, t_ref: NDArray[np.float64], positions: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Per-axis linear interpolation, clamped at the ends."""
    t_query = np.asarray(t_query, dtype=float)
    return np.column_stack([np.interp(t_query, t_ref, positions[:, k]) for k in range(positions.shape[1])])


def position_errors(
    t_est: ArrayLike,
    p_est: ArrayLike,
    t_gt: NDArray[np.float64],
    p_gt: NDArray[np.float64],
) -> ErrorSeries:
    """``||p_est - p_gt||`` with ground truth interpolated to the estimate times."""
    t_est = np.asarray(t_est, dtype=float)
    p_est = np.asarray(p_est, dtype=float).reshape(-1, 3)
    gt = interpolate_positions(t_est, t_gt, p_gt)
    return ErrorSeries(t_est, np.linalg.norm(p_est - gt, axis=1))


@dataclass(frozen=True)
class CdfSummary:
    grid: NDArray[np.float64]
    fraction: NDArray[np.float64]
    q1: float
    q2: float
    q3: float

    def __post_init__(self) -> None:
        if self.grid.shape != self.fraction.shape or self.grid.size == 0:
            raise ValueError("grid and fraction must be equal-length and nonempty")
        if np.any(np.diff(self.fraction) < 0) or self.fraction[0] < 0 or self.fraction[-1] > 1:
            raise ValueError("cumulative fraction must be non-decreasing within [0, 1]")

    def evaluate(self, x: ArrayLike) -> NDArray[np.float64]:
        """Right-continuous step CDF at ``x``."""
        idx = np.searchsorted(self.grid, np.asarray(x, dtype=float), side="right")
        return np.where(idx > 0, self.fraction[np.maximum(idx - 1, 0)], 0.0)

    def quantile(self, q: float) -> float:
        """Inverse of the step CDF: smallest grid value with fraction >= q."""
        return _step_quantile(self.grid, self.fraction, q)


def empirical_cdf(errors: ErrorSeries | ArrayLike) -> CdfSummary:
    """Step CDF over the sorted errors with type-7 quartiles."""
    e = errors.errors if isinstance(errors, ErrorSeries) else np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("cannot build a CDF from an empty error series")
    grid = np.sort(e)
    # ties share the fraction of their last occurrence
    last = np.searchsorted(grid, grid, side="right")
    fraction = last / grid.size
    q1, q2, q3 = np.quantile(e, [0.25, 0.5, 0.75], method="linear")
    return CdfSummary(grid, fraction, float(q1), float(q2), float(q3))


def median_cdf(runs: Sequence[CdfSummary], grid: ArrayLike | None = None) -> CdfSummary:
    """Pointwise median of the runs' CDFs on a shared grid.

    The default grid is the union of all runs' error values. Quartiles are
    read off the median curve as the smallest grid value reaching each level.
    """
    if not runs:
        raise ValueError("median_cdf needs at least one run")
    if grid is None:
        grid = np.unique(np.concatenate([r.grid for r in runs]))
    grid = np.asarray(grid, dtype=float)
    curves = np.vstack([r.evaluate(grid) for r in runs])
    frac = np.median(curves, axis=0)
    if len(runs) == 1:
        r = runs[0]
        return CdfSummary(grid, frac, r.q1, r.q2, r.q3)
    q = [_step_quantile(grid, frac, level) for level in (0.25, 0.5, 0.75)]
    return CdfSummary(grid, frac, *q)


def _step_quantile(grid: NDArray[np.float64], fraction: NDArray[np.float64], level: float) -> float:
    i = int(np.searchsorted(fraction, level - 1e-12, side="left"))
    return float(grid[min(i, grid.size - 1)])


def write_cdf_csv(cdf: CdfSummary, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["error", "fraction"])
        for x, y in zip(cdf.grid, cdf.fraction):
            w.writerow([repr(float(x)), repr(float(y))])


def write_quartiles_csv(rows: Sequence[tuple[str, CdfSummary]], path: str | Path) -> None:
    """Box-plot data: one row per label with its quartiles."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label", "q1", "q2", "q3", "min", "max"])
        for label, c in rows:
            w.writerow([label, *(repr(float(x)) for x in (c.q1, c.q2, c.q3, c.grid[0], c.grid[-1]))])


def write_errors_csv(series: ErrorSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "error"])
        for t, e in zip(series.timestamps, series.errors):
            w.writerow([repr(float(t)), repr(float(e))])


def read_positions_csv(path: str | Path) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Read ``t, px, py, pz`` columns (by header name) from a trajectory csv.

    Raises:
        ValueError: missing columns, non-numeric cells, no rows or unsorted times.
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    try:
        cols = [header.index(c) for c in ("t", "px", "py", "pz")]
    except ValueError:
        raise ValueError(f"{path}: header must contain t, px, py, pz") from None
    try:
        data = np.array([[float(r[c]) for c in cols] for r in rows[1:]], dtype=float).reshape(-1, 4)
    except (ValueError, IndexError) as e:
        raise ValueError(f"{path}: {e}") from None
    if data.shape[0] == 0:
        raise ValueError(f"{path}: no rows")
    if not np.all(np.isfinite(data)) or np.any(np.diff(data[:, 0]) <= 0):
        raise ValueError(f"{path}: times must be finite and strictly increasing")
    return data[:, 0], data[:, 1:]
