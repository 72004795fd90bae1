"""Seeded batches of simulated runs and their summary tables."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .config import MODES, ConfigError, RunConfig
from .metrics import CdfSummary, ErrorSeries, empirical_cdf, median_cdf, write_cdf_csv, write_errors_csv, write_quartiles_csv
from .pipeline import prepare, run
from .sensors import BeaconMap
from .simulator import Scenario, simulate


@dataclass
class RunRecord:
    seed: int
    mode: str
    frontend_errors: ErrorSeries
    frontend: CdfSummary
    backend: CdfSummary | None = None
    # final back-end accel bias
    bias: NDArray[np.float64] | None = None
    # mean beacon error of the prior map and of the back-end map
    map_error_prior: float | None = None
    map_error_solved: float | None = None


def map_error(estimate: BeaconMap, truth: BeaconMap) -> float:
    """Mean 3-D distance between estimated and true beacon positions."""
    ids = [b for b in truth.ids() if b in estimate]
    if not ids:
        raise ValueError("maps share no beacons")
    return float(np.mean([np.linalg.norm(estimate.position(b) - truth.position(b)) for b in ids]))


def run_seed(scenario: Scenario, cfg: RunConfig, seed: int, modes: Sequence[str]) -> list[RunRecord]:
    """Simulate one log with ``seed`` and run every mode on it with the same seed."""
    sim = simulate(scenario, seed)
    cfg = replace(cfg, seed=seed)
    prep = prepare(sim.log, cfg)
    bounds = scenario.world.search_area()
    records = []
    for mode in modes:
        res = run(prep, sim.prior_map, bounds, cfg, mode)
        rec = RunRecord(seed, mode, res.frontend_errors, empirical_cdf(res.frontend_errors))
        if res.solution is not None:
            rec.backend = empirical_cdf(res.backend_errors)
            rec.bias = res.solution.biases[-1].accel.copy()
            rec.map_error_prior = map_error(sim.prior_map, sim.true_map)
            rec.map_error_solved = map_error(res.solution.beacons, sim.true_map)
        records.append(rec)
    return records


def _run_seed_args(args):
    return run_seed(*args)


@dataclass
class BatchResult:
    records: list[RunRecord]

    def modes(self) -> list[str]:
        return list(dict.fromkeys(r.mode for r in self.records))

    def for_mode(self, mode: str) -> list[RunRecord]:
        return [r for r in self.records if r.mode == mode]

    def median_cdf(self, mode: str) -> CdfSummary:
        return median_cdf([r.frontend for r in self.for_mode(mode)])

    def write(self, outdir: str | Path) -> None:
        """Per-run error csvs, a per-run summary, median CDFs and box-plot quartiles."""
        out = Path(outdir)
        (out / "runs").mkdir(parents=True, exist_ok=True)
        with open(out / "runs.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(
                ["seed", "mode", "q1", "q2", "q3", "rmse", "backend_q3", "bias_x", "bias_y", "bias_z", "map_prior", "map_solved"]
            )
            for r in self.records:
                c = r.frontend
                row = [r.seed, r.mode, *(repr(x) for x in (c.q1, c.q2, c.q3, r.frontend_errors.rmse()))]
                row.append(repr(r.backend.q3) if r.backend is not None else "")
                row += [repr(float(b)) for b in r.bias] if r.bias is not None else ["", "", ""]
                row += [repr(x) if x is not None else "" for x in (r.map_error_prior, r.map_error_solved)]
                w.writerow(row)
                write_errors_csv(r.frontend_errors, out / "runs" / f"{r.mode}_seed{r.seed}.csv")
        rows = []
        for mode in self.modes():
            cdf = self.median_cdf(mode)
            write_cdf_csv(cdf, out / f"median_cdf_{mode}.csv")
            rows.append((mode, cdf))
        write_quartiles_csv(rows, out / "quartiles.csv")


def run_batch(
    scenario: Scenario,
    cfg: RunConfig,
    n_runs: int,
    modes: Sequence[str] | None = None,
    jobs: int = 1,
) -> BatchResult:
    """Runs with seeds ``cfg.seed .. cfg.seed + n_runs - 1``; results are ordered by seed then mode."""
    if n_runs < 1:
        raise ConfigError("n_runs must be at least 1")
    modes = list(modes or [cfg.mode])
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ConfigError(f"unknown modes: {', '.join(bad)}")
    args = [(scenario, cfg, cfg.seed + i, modes) for i in range(n_runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            per_seed = list(ex.map(_run_seed_args, args))
    else:
        per_seed = [_run_seed_args(a) for a in args]
    return BatchResult([r for recs in per_seed for r in recs])
